"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL summary that is echoed at the end of
the pytest run.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record_criterion
from gradcheck import ALL_LOSSES, max_relative_error, random_problem
from tdcal import calibrate as C
from tdcal import conformal, envsim, metrics
from tdcal import predictor as P
from tdcal.rollout import Dataset, SplitSpec, StaticMethod, split_by_task, static_success_scores
from tdcal.search import SearchConfig, oracle_scorer, run_search_experiment

QUANTILES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def feature_dim(ds):
    return len(ds.rollouts[0].steps[0].features)


def scored(seqs, rollouts):
    return [metrics.ScoredRollout(s, r.label, r.task_id) for s, r in zip(seqs, rollouts)]


# --------------------------------------------------------------------------- 1


def oracle_equivalence_env(env, pol, seed):
    start = time.time()
    tables = envsim.exact_q(env, pol, 1.0)
    train = envsim.simulate(env, pol, 500, 1.0, seed=100 + seed)
    val = envsim.simulate(env, pol, 200, 1.0, seed=200 + seed)
    # a large test set keeps sampling noise well below the gaps being compared
    test = envsim.simulate(env, pol, 5000, 1.0, seed=300 + seed)
    d = feature_dim(train)
    scores = {}
    for loss in ("tdqc", "bce"):
        model = P.init("recurrent", d, seed, hidden=32)
        cfg = C.TrainConfig(loss_kind=loss, epochs=300, lr=0.01, eval_every=5)
        model, _ = C.train(train, model, cfg, val=val.rollouts)
        scores[loss] = P.success_scores(model, test.rollouts)
    fstar = [envsim.oracle_success_scores(tables, r) for r in test.rollouts]
    scores["oracle"] = fstar
    for m in StaticMethod:
        scores[m.value] = [static_success_scores(r, m) for r in test.rollouts]
    rate = train.labels.mean()
    scores["constant"] = [np.full(r.horizon, rate) for r in test.rollouts]
    brier = {k: [metrics.sequential_brier(scored(v, test.rollouts), q) for q in QUANTILES] for k, v in scores.items()}
    oracle_min = all(brier["oracle"][i] <= min(b[i] for b in brier.values()) for i in range(len(QUANTILES)))
    mad = float(np.mean(np.concatenate([np.abs(a - b) for a, b in zip(scores["tdqc"], fstar)])))
    return oracle_min, mad, time.time() - start, brier


def test_criterion1_oracle_equivalence():
    envs = [("example1",) + envsim.build_example1() + (0,)]
    for seed in range(3):
        env, pol = envsim.build_gridworld(envsim.GridConfig(seed=seed))[0]
        envs.append((f"grid{seed}", env, pol, seed))
    ok, parts = True, []
    for name, env, pol, seed in envs:
        oracle_min, mad, secs, _ = oracle_equivalence_env(env, pol, seed)
        good = oracle_min and mad < 0.1 and secs < 300
        ok &= good
        parts.append(f"{name}: oracle_min={oracle_min} mad={mad:.4f} t={secs:.0f}s")
    record_criterion(1, ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------- 2


def test_criterion2_example1():
    env, pol = envsim.build_example1()
    train = envsim.simulate(env, pol, 100, 1.0, seed=0)
    test = envsim.simulate(env, pol, 200, 1.0, seed=1)
    static = scored([static_success_scores(r, StaticMethod.AVG_PROB) for r in test], test.rollouts)
    b_static = metrics.sequential_brier(static, 1.0)
    model, _ = C.train(train, P.init("recurrent", feature_dim(train), 0, hidden=8), C.TrainConfig(epochs=500, lr=0.01))
    b_td = metrics.sequential_brier(scored(P.success_scores(model, test.rollouts), test.rollouts), 1.0)
    ok = abs(b_static - 0.25) < 1e-12 and b_td < 0.01
    record_criterion(2, ok, f"static final-step Brier={b_static:.6f}, TDQC={b_td:.2e}")
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion3_gradients():
    worst = {}
    for kind in ("feedforward", "recurrent"):
        for loss in ALL_LOSSES:
            worst[(kind, loss)] = max(max_relative_error(*random_problem(kind, loss, s))[0] for s in range(20))
    top = max(worst.values())
    ok = top < 1e-4
    record_criterion(3, ok, f"max relative error {top:.2e} over 2 architectures x 5 losses x 20 seeds")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion4_decomposition_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 500))
        # mix of continuous and repeated scores so exact bins hold several members
        f = np.where(rng.uniform(size=n) < 0.5, rng.uniform(size=n), rng.integers(0, 11, size=n) / 10)
        y = rng.integers(0, 2, size=n)
        cal, ref, tot = metrics.brier_decomposition(f, y, bins="exact")
        worst = max(worst, abs(cal + ref - tot))
    ok = worst <= 1e-12
    record_criterion(4, ok, f"max |cal + ref - total| = {worst:.1e} over 100 sets")
    assert ok


# --------------------------------------------------------------------------- 5


def successful_failure_scores(env, pol, tables, n, seed):
    out, i = [], 0
    while len(out) < n:
        ds = envsim.simulate(env, pol, 200, 1.0, seed=seed * 1000 + i)
        out += [1.0 - envsim.oracle_success_scores(tables, r) for r in ds if r.label == 1]
        i += 1
    return out[:n]


def test_criterion5_conformal_coverage():
    start = time.time()
    env, pol = envsim.build_gridworld(envsim.GridConfig(seed=0))[0]
    tables = envsim.exact_q(env, pol, 1.0)
    cal = successful_failure_scores(env, pol, tables, 200, 1)
    held = successful_failure_scores(env, pol, tables, 500, 2)
    ok, parts = True, []
    for alpha in (0.05, 0.1, 0.2):
        margin = 3 * math.sqrt(alpha * (1 - alpha) / 500)
        band = conformal.fit_band(cal, alpha, split_seed=0)
        cov = conformal.coverage_eval(band, held)
        stops = [conformal.early_stop_monitor(band, lambda t, s=s: 1.0 - s[t - 1], len(s)) for s in held]
        fpr = float(np.mean([s is not None for s in stops]))
        good = cov >= 1 - alpha - margin and fpr <= alpha + margin
        ok &= good
        parts.append(f"alpha={alpha}: coverage={cov:.3f} fpr={fpr:.3f}")
    secs = time.time() - start
    ok &= secs < 60
    record_criterion(5, ok, "; ".join(parts) + f"; t={secs:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 6 and 8

AUC_SPLITS = ("val_seen", "val_unseen")


@pytest.fixture(scope="module")
def td_vs_bce_runs():
    """21 task-split seeds on the aliased gridworld; per-method learning rate chosen on val_seen."""
    tasks = envsim.build_gridworld(envsim.GridConfig(n_tasks=10, seed=0, aliasing=True))
    rolls = []
    for k, (env, pol) in enumerate(tasks):
        rolls += envsim.simulate(env, pol, 30, 1.0, seed=1000 + k, task_id=env.name).rollouts
    ds = Dataset(tuple(rolls))
    d = feature_dim(ds)
    runs = []
    for seed in range(21):
        train, seen, unseen = split_by_task(ds, SplitSpec(seed=seed, unseen_task_count=3, train_fraction=0.6))
        cfg = C.TrainConfig(epochs=60, eval_every=5, seed=seed, batch_rollouts=32)
        cells = {}
        for loss in ("tdqc", "bce"):
            model, _, _ = C.train_with_lr_search(train, lambda: P.init("recurrent", d, seed, hidden=32),
                                                 C.TrainConfig(**{**cfg.__dict__, "loss_kind": loss}),
                                                 seen.rollouts, (0.002, 0.005, 0.02))
            for split, part in (("val_seen", seen), ("val_unseen", unseen)):
                cells[(loss, split)] = P.success_scores(model, part.rollouts)
        rate = train.labels.mean()
        for split, part in (("val_seen", seen), ("val_unseen", unseen)):
            for m in StaticMethod:
                cells[(m.value, split)] = [static_success_scores(r, m) for r in part]
            cells[("constant", split)] = [np.full(r.horizon, rate) for r in part]
        reports = {}
        for (method, split), seqs in cells.items():
            part = seen if split == "val_seen" else unseen
            reports[(method, split)] = metrics.evaluate(scored(seqs, part.rollouts), method, split, QUANTILES[:5])
        runs.append(reports)
    return runs


def test_criterion6_td_vs_bce(td_vs_bce_runs):
    wins = 0
    for reports in td_vs_bce_runs:
        wins += reports[("tdqc", "val_unseen")].brier_by_quantile[0.8] <= reports[("bce", "val_unseen")].brier_by_quantile[0.8]
    ok = wins >= 14
    record_criterion(6, ok, f"TDQC unseen-task Brier@0.8 <= BCE in {wins}/21 seeds")
    assert ok


def test_criterion8_brier_auc_correlation(td_vs_bce_runs):
    keys = list(td_vs_bce_runs[0])
    brier = [np.mean([np.mean(list(r[k].brier_by_quantile.values())) for r in td_vs_bce_runs]) for k in keys]
    auc = [np.mean([r[k].roc_auc for r in td_vs_bce_runs]) for k in keys]
    rho = metrics.spearman(brier, auc)
    ok = len(keys) >= 8 and rho < 0
    record_criterion(8, ok, f"Spearman(Brier, AUC) = {rho:.3f} over {len(keys)} (method, split) cells")
    assert ok


# --------------------------------------------------------------------------- 7


def test_criterion7_guided_search():
    env, pol = envsim.build_gridworld(envsim.GridConfig(seed=0, policy_noise=0.3))[0]
    f = oracle_scorer(envsim.exact_q(env, pol, 1.0))
    n = 500
    configs = [None] + [SearchConfig(10, t, 1.5, 0) for t in (-math.inf, 0.1, 0.3, 0.5)]
    rows = run_search_experiment([(env, pol)], [f], configs, n)
    base, full, sweep = rows[0], rows[1], rows[2:]
    p0, p1 = base["success_rate"], full["success_rate"]
    se = math.sqrt(max(p0 * (1 - p0), p1 * (1 - p1)) / n)
    steps = [r["search_steps"] for r in sweep]
    decreasing = all(a > b for a, b in zip(steps, steps[1:]))
    ok = p1 - p0 >= 3 * se and decreasing
    record_criterion(7, ok, f"greedy={p0:.3f} guided={p1:.3f} (gain {(p1 - p0) / se:.1f} SE); "
                            f"search steps at thresholds 0.1/0.3/0.5 = {', '.join(f'{s:.3f}' for s in steps)}")
    assert ok


# --------------------------------------------------------------------------- 9

CONFIG = """
[env]
n_tasks = 3
rollouts_per_task = 40
aliasing = true

[split]
unseen_task_count = 1

[train]
epochs = 10
eval_every = 2
lr_grid = 0.005,0.02

[search]
samples = 1,4
thresholds = -inf,0.5
episodes = 20
"""

OUTPUTS = {
    "gen": ("rollouts.jsonl", "train.jsonl", "val_seen.jsonl", "val_unseen.jsonl", "split.csv"),
    "train": ("predictor.json", "train_log.csv"),
    "eval": ("metrics.csv",),
    "band": ("band.csv",),
    "stop-sim": ("stops.csv", "sweep.csv"),
    "search": ("search.csv",),
    "export": ("brier_curves.csv", "brier_auc.csv"),
}


def run_pipeline(workdir):
    files = {}
    for command, names in OUTPUTS.items():
        proc = subprocess.run([sys.executable, "-m", "tdcal.cli", command, "-c", str(workdir / "run.ini")],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        for name in names:
            files[name] = (workdir / "out" / name).read_bytes()
    return files


def test_criterion9_determinism(tmp_path):
    # two fresh directories with the same config (relative out_dir), then an
    # in-place re-run that overwrites the first directory's outputs
    snapshots = []
    for rep in range(2):
        work = tmp_path / f"run{rep}"
        (work / "out").mkdir(parents=True)
        (work / "run.ini").write_text(CONFIG)
        snapshots.append(run_pipeline(work))
    snapshots.append(run_pipeline(tmp_path / "run0"))
    differing = sorted({k for snap in snapshots[1:] for k in snap if snap[k] != snapshots[0][k]})
    ok = not differing
    record_criterion(9, ok, f"{len(snapshots[0])} output files from 7 commands, 3 runs compared byte for byte"
                            + (f"; differing: {differing}" if differing else ""))
    assert ok
