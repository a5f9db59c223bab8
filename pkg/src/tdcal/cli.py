"""Command-line entry point: ``tdcal <command> --config run.ini``.

Commands read and write files in the configured output directory:

    gen       rollouts.jsonl, train/val_seen/val_unseen.jsonl, split.csv
    train     predictor.json, train_log.csv
    eval      metrics.csv
    band      band.csv
    stop-sim  stops.csv, sweep.csv
    search    search.csv
    export    brier_curves.csv, brier_auc.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import calibrate, conformal, envsim, metrics, search
from .config import ConfigError, RunConfig, load_config
from .predictor import (
    PredictorFormatError,
    encode_steps,
    forward,
    init,
    load_predictor,
    save_predictor,
    success_scores,
)
from .rollout import Dataset, RolloutError, SplitSpec, StaticMethod, load_rollouts, save_rollouts, split_by_task
from .rollout import static_success_scores

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SPLITS = ("train", "val_seen", "val_unseen")


class DataError(RuntimeError):
    """Missing or inconsistent input files."""


# --------------------------------------------------------------------------- helpers


def _meta_line(cfg: RunConfig) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in cfg.meta().items()) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _csv_text(cfg: RunConfig, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    buf.write(_meta_line(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "nan" if math.isnan(x) else f"{x:.10g}"


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    if not out.is_dir():
        raise ConfigError(f"output directory does not exist: {out}")
    return out


def _load_split(cfg: RunConfig, name: str, required: bool = True) -> Dataset | None:
    path = cfg.out_dir / f"{name}.jsonl"
    if not path.is_file():
        if required:
            raise DataError(f"missing {path}; run `tdcal gen` first")
        return None
    return load_rollouts(path)


def _load_model(cfg: RunConfig):
    path = cfg.out_dir / "predictor.json"
    if not path.is_file():
        raise DataError(f"missing {path}; run `tdcal train` first")
    return load_predictor(path)


def build_tasks(cfg: RunConfig) -> list[tuple[envsim.TabularPOMDP, envsim.TabularPolicy]]:
    if cfg.get("env", "kind") == "example1":
        return [envsim.build_example1()]
    try:
        grid = envsim.GridConfig(
            width=cfg.int("env", "width"),
            height=cfg.int("env", "height"),
            n_tasks=cfg.int("env", "n_tasks"),
            slip_prob=cfg.float("env", "slip_prob"),
            horizon=cfg.int("env", "horizon"),
            seed=cfg.seed,
            epsilon=cfg.float("env", "epsilon"),
            policy_noise=cfg.float("env", "policy_noise"),
            aliasing=cfg.bool("env", "aliasing"),
            min_distance=cfg.int("env", "min_distance"),
            max_distance=cfg.int("env", "max_distance"),
        )
    except ValueError as exc:
        raise ConfigError(f"[env] {exc}") from exc
    return envsim.build_gridworld(grid)


def task_seed(run_seed: int, k: int) -> int:
    """Independent simulation seed for task ``k``."""
    return int(np.random.SeedSequence([run_seed, k]).generate_state(1)[0])


def _learned_name(cfg: RunConfig) -> str:
    return cfg.get("train", "loss")


# --------------------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    c = cfg.float("env", "threshold")
    n = cfg.int("env", "rollouts_per_task")
    rollouts = []
    for k, (env, policy) in enumerate(build_tasks(cfg)):
        rollouts += envsim.simulate(env, policy, n, c, task_seed(cfg.seed, k), task_id=env.name).rollouts
    dataset = Dataset(tuple(rollouts))
    spec = SplitSpec(cfg.seed, cfg.int("split", "unseen_task_count"), cfg.float("split", "train_fraction"))
    try:
        parts = split_by_task(dataset, spec)
    except ValueError as exc:
        raise ConfigError(f"[split] {exc}") from exc
    save_rollouts(dataset, out / "rollouts.jsonl")
    rows = []
    for name, part in zip(SPLITS, parts):
        path = out / f"{name}.jsonl"
        if part is None:
            path.unlink(missing_ok=True)
            continue
        save_rollouts(part, path)
        for task, rs in sorted(part.by_task().items()):
            rows.append([task, name, len(rs), sum(r.label for r in rs)])
    _write(out / "split.csv", _csv_text(cfg, ["task_id", "split", "n_rollouts", "n_success"], rows))


def _train_config(cfg: RunConfig) -> calibrate.TrainConfig:
    return calibrate.TrainConfig(
        loss_kind=cfg.get("train", "loss"),
        td_lambda=cfg.float("train", "td_lambda"),
        lr=cfg.float("train", "lr"),
        lr_step=cfg.int("train", "lr_step"),
        lr_gamma=cfg.float("train", "lr_gamma"),
        weight_decay=cfg.float("train", "weight_decay"),
        l2_reg=cfg.float("train", "l2_reg"),
        target_update_period=cfg.int("train", "target_update_period"),
        epochs=cfg.int("train", "epochs"),
        batch_rollouts=cfg.int("train", "batch_rollouts"),
        seed=cfg.seed,
        class_weighting=cfg.bool("train", "class_weighting"),
        eval_every=cfg.int("train", "eval_every"),
        quantiles=tuple(cfg.floats("eval", "quantiles")),
    )


def make_predictor_factory(cfg: RunConfig, input_dim: int):
    kind = cfg.get("predictor", "kind")
    arch = {
        "hidden": cfg.int("predictor", "hidden"),
        "input_kind": cfg.get("predictor", "input_kind"),
        "accumulate": cfg.get("train", "loss") == "safe_cumulative",
    }
    if kind == "feedforward":
        arch["window"] = cfg.int("predictor", "window")
    return lambda: init(kind, input_dim, cfg.seed, **arch)


def cmd_train(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val_seen", required=False)
    val_rollouts = list(val) if val is not None else None
    input_kind = cfg.get("predictor", "input_kind")
    try:
        input_dim = encode_steps(train.rollouts[0], input_kind).shape[1]
    except RolloutError as exc:
        raise DataError(f"rollouts lack fields for input kind {input_kind!r}: {exc}") from exc
    factory = make_predictor_factory(cfg, input_dim)
    tcfg = _train_config(cfg)
    lr_grid = cfg.floats("train", "lr_grid")
    if lr_grid:
        model, log, _ = calibrate.train_with_lr_search(train, factory, tcfg, val_rollouts, lr_grid)
    else:
        model, log = calibrate.train(train, factory(), tcfg, val_rollouts)
    save_predictor(model, out / "predictor.json")
    _write(out / "train_log.csv", _meta_line(cfg) + log.to_csv())


def method_scores(cfg: RunConfig, methods: Sequence[str], rollouts: Sequence, model, train_rate: float,
                  oracles: dict | None) -> dict[str, list[np.ndarray]]:
    out: dict[str, list[np.ndarray]] = {}
    if "learned" in methods:
        out[_learned_name(cfg)] = success_scores(model, rollouts)
    if "static" in methods:
        for m in StaticMethod:
            try:
                out[m.value] = [static_success_scores(r, m) for r in rollouts]
            except RolloutError as exc:
                raise DataError(f"static baseline {m.value}: {exc}") from exc
    if "constant" in methods:
        out["constant"] = [np.full(r.horizon, train_rate) for r in rollouts]
    if "oracle" in methods and oracles is not None:
        try:
            out["oracle"] = [envsim.oracle_success_scores(oracles[r.task_id], r) for r in rollouts]
        except KeyError as exc:
            raise DataError(f"no environment for task {exc} in this config") from exc
    return out


def _oracles(cfg: RunConfig) -> dict:
    c = cfg.float("env", "threshold")
    budget = cfg.int("env", "oracle_budget")
    return {env.name: envsim.exact_q(env, pol, c, budget) for env, pol in build_tasks(cfg)}


def cmd_eval(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    methods = cfg.words("eval", "methods")
    train = _load_split(cfg, "train")
    model = _load_model(cfg) if "learned" in methods else None
    oracles = _oracles(cfg) if "oracle" in methods else None
    rate = float(train.labels.mean())
    quantiles = cfg.floats("eval", "quantiles")
    bins = cfg.int("eval", "bins")
    reports = []
    for split in ("val_seen", "val_unseen"):
        data = _load_split(cfg, split, required=False)
        if data is None:
            continue
        scores = method_scores(cfg, methods, data.rollouts, model, rate, oracles)
        for name, seqs in scores.items():
            scored = [metrics.ScoredRollout(s, r.label, r.task_id) for s, r in zip(seqs, data.rollouts)]
            reports.append(metrics.evaluate(scored, name, split, quantiles, bins))
    if not reports:
        raise DataError("no evaluation splits found")
    meta = {**cfg.meta(), "ece_bins": str(bins)}
    _write(out / "metrics.csv", metrics.reports_to_csv(reports, meta))


def _failure_sequences(model, rollouts, successes_only: bool):
    chosen = [r for r in rollouts if r.label == 1] if successes_only else list(rollouts)
    return [1.0 - s for s in success_scores(model, chosen)], chosen


def cmd_band(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    fit = _load_split(cfg, cfg.get("conformal", "fit_split"))
    seqs, _ = _failure_sequences(model, fit.rollouts, successes_only=True)
    try:
        band = conformal.fit_band(seqs, cfg.float("conformal", "alpha"), cfg.int("conformal", "split_seed"))
    except ValueError as exc:
        raise DataError(f"band fitting: {exc}") from exc
    _write(out / "band.csv", _meta_line(cfg) + band.to_csv())


def cmd_stopsim(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    path = out / "band.csv"
    if not path.is_file():
        raise DataError(f"missing {path}; run `tdcal band` first")
    band = conformal.ConformalBand.from_csv(path.read_text(encoding="utf-8"))
    model = _load_model(cfg)
    test = _load_split(cfg, cfg.get("conformal", "test_split"))
    rows = []
    for i, r in enumerate(test.rollouts):
        stop = conformal.early_stop_monitor(band, lambda t, r=r: forward(model, r, t), r.horizon)
        rows.append([i, r.task_id, r.label, r.horizon, "" if stop is None else stop])
    _write(out / "stops.csv", _csv_text(cfg, ["index", "task_id", "label", "horizon", "stop_step"], rows))

    fit = _load_split(cfg, cfg.get("conformal", "fit_split"))
    fit_seqs, _ = _failure_sequences(model, fit.rollouts, successes_only=True)
    test_seqs, _ = _failure_sequences(model, test.rollouts, successes_only=False)
    labels = [r.label for r in test.rollouts]
    success_seqs = [s for s, y in zip(test_seqs, labels) if y == 1]
    sweep = []
    for a in cfg.floats("conformal", "alpha_grid"):
        b = conformal.fit_band(fit_seqs, a, cfg.int("conformal", "split_seed"))
        flagged = np.array([conformal.first_crossing(b, s) is not None for s in test_seqs])
        y = np.array(labels)
        tpr = float(flagged[y == 0].mean()) if np.any(y == 0) else float("nan")
        fpr = float(flagged[y == 1].mean()) if np.any(y == 1) else float("nan")
        cov = conformal.coverage_eval(b, success_seqs) if success_seqs else float("nan")
        sweep.append([_fmt(a), _fmt(tpr), _fmt(fpr), _fmt(cov), int(np.sum(y == 0)), int(np.sum(y == 1))])
    _write(out / "sweep.csv", _csv_text(cfg, ["alpha", "tpr", "fpr", "coverage", "n_fail", "n_success"], sweep))


def cmd_search(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    tasks = build_tasks(cfg)
    c = cfg.float("env", "threshold")
    if cfg.get("search", "scorer") == "oracle":
        budget = cfg.int("env", "oracle_budget")
        scorers = [search.oracle_scorer(envsim.exact_q(env, pol, c, budget)) for env, pol in tasks]
    else:
        model = _load_model(cfg)
        scorers = [search.predictor_scorer(model, env, pol) for env, pol in tasks]
    configs: list = [None] if cfg.bool("search", "baseline") else []
    for m in cfg.ints("search", "samples"):
        for thr in cfg.floats("search", "thresholds"):
            configs.append(search.SearchConfig(m, thr, cfg.float("search", "tau"), cfg.seed))
    rows = search.run_search_experiment(tasks, scorers, configs, cfg.int("search", "episodes"), c)
    _write(out / "search.csv", search.search_rows_to_csv(rows, cfg.meta()))


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise DataError(f"missing {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_export(cfg: RunConfig) -> None:
    """Plot-ready tables: Brier-vs-quantile curves and the Brier/AUC scatter."""
    out = _out_dir(cfg)
    rows = _read_csv(out / "metrics.csv")
    methods = list(dict.fromkeys(r["method"] for r in rows))
    curves = []
    for split in dict.fromkeys(r["split"] for r in rows):
        for q in dict.fromkeys(r["quantile"] for r in rows if r["split"] == split):
            by = {r["method"]: r["brier"] for r in rows if r["split"] == split and r["quantile"] == q}
            curves.append([split, q] + [by.get(m, "") for m in methods])
    _write(out / "brier_curves.csv", _csv_text(cfg, ["split", "quantile"] + methods, curves))

    cells = {}
    for r in rows:
        cells.setdefault((r["method"], r["split"]), ([], r["auc"]))[0].append(float(r["brier"]))
    scatter = [[m, s, _fmt(float(np.mean(b))), auc] for (m, s), (b, auc) in cells.items()]
    pts = [(float(b), float(a)) for _, _, b, a in scatter if a != "nan"]
    rho = metrics.spearman(*zip(*pts)) if len(pts) >= 2 else float("nan")
    text = _csv_text(cfg, ["method", "split", "mean_brier", "auc"], scatter)
    _write(out / "brier_auc.csv", text + f"# spearman_brier_auc={_fmt(rho)}\n")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "band": cmd_band,
    "stop-sim": cmd_stopsim,
    "search": cmd_search,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdcal", description="Temporal-difference calibration of success predictors")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out-dir", help="override [run] out_dir")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config value (repeatable)")
        if name == "train":
            p.add_argument("--loss", help="override [train] loss")
        if name in ("band", "stop-sim"):
            p.add_argument("--alpha", type=float, help="override [conformal] alpha")
    return parser


def parse_overrides(args) -> dict[str, str]:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["run.out_dir"] = str(Path(args.out_dir).resolve())
    if getattr(args, "loss", None) is not None:
        overrides["train.loss"] = args.loss
    if getattr(args, "alpha", None) is not None:
        overrides["conformal.alpha"] = repr(args.alpha)
    return overrides


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(args))
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"tdcal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except calibrate.TrainingDivergence as exc:
        print(f"tdcal: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, RolloutError, PredictorFormatError, envsim.OracleBudgetError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"tdcal: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
