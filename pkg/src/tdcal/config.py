"""Run configuration: a flat INI file with one section per stage.

Every key has a default, so a config only lists what it changes.  The
effective configuration (defaults + file + overrides) is canonicalised and
hashed; the hash is stamped into every output file.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from pathlib import Path
from typing import Mapping

from .predictor import INPUT_KINDS

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "out_dir": "out"},
    "env": {
        "kind": "gridworld",  # gridworld | example1
        "width": "5",
        "height": "5",
        "n_tasks": "1",
        "slip_prob": "0.2",
        "horizon": "8",
        "epsilon": "0.2",
        "policy_noise": "0.0",
        "aliasing": "false",
        "min_distance": "4",
        "max_distance": "5",
        "threshold": "1.0",
        "rollouts_per_task": "100",
        "oracle_budget": "1000000",
    },
    "split": {"unseen_task_count": "0", "train_fraction": "0.6"},
    "predictor": {"kind": "recurrent", "hidden": "32", "window": "1", "input_kind": "features"},
    "train": {
        "loss": "tdqc",
        "td_lambda": "0.0",
        "lr": "0.005",
        "lr_grid": "",
        "lr_step": "200",
        "lr_gamma": "1.0",
        "weight_decay": "0.01",
        "l2_reg": "0.0",
        "target_update_period": "10",
        "epochs": "60",
        "batch_rollouts": "32",
        "class_weighting": "false",
        "eval_every": "5",
    },
    "eval": {
        "methods": "learned,static,constant,oracle",
        "quantiles": "0,0.2,0.4,0.6,0.8",
        "bins": "10",
    },
    "conformal": {
        "alpha": "0.1",
        "alpha_grid": "0.05,0.1,0.2,0.5,0.8",
        "split_seed": "0",
        "fit_split": "val_seen",
        "test_split": "val_unseen",
    },
    "search": {
        "scorer": "oracle",  # oracle | predictor
        "samples": "10",  # comma-separated list of M values
        "tau": "1.5",
        "thresholds": "-inf,0.2,0.5",
        "episodes": "200",
        "baseline": "true",
    },
}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class RunConfig:
    """Typed accessors over the effective configuration."""

    def __init__(self, values: Mapping[str, Mapping[str, str]], base_dir: Path | None = None):
        self.values = {s: dict(v) for s, v in values.items()}
        self.base_dir = base_dir or Path(".")

    # -- typed getters
    def get(self, section: str, key: str) -> str:
        try:
            return self.values[section][key]
        except KeyError as exc:
            raise ConfigError(f"missing config key [{section}] {key}") from exc

    def int(self, section: str, key: str) -> int:
        try:
            return int(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer") from exc

    def float(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number") from exc

    def bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean")

    def floats(self, section: str, key: str) -> list[float]:
        raw = self.get(section, key).strip()
        if not raw:
            return []
        try:
            return [float(x) for x in raw.split(",")]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a comma-separated list of numbers") from exc

    def ints(self, section: str, key: str) -> list[int]:
        try:
            return [int(x) for x in self.words(section, key)]
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a comma-separated list of integers") from exc

    def words(self, section: str, key: str) -> list[str]:
        return [w.strip() for w in self.get(section, key).split(",") if w.strip()]

    @property
    def seed(self) -> int:
        return self.int("run", "seed")

    @property
    def out_dir(self) -> Path:
        p = Path(self.get("run", "out_dir"))
        return p if p.is_absolute() else self.base_dir / p

    # -- identity
    def canonical(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key].strip()}")
        return "\n".join(lines)

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def meta(self) -> dict[str, str]:
        return {"config_sha256": self.sha256(), "seed": str(self.seed)}


def load_config(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Merge defaults, the file at ``path`` and ``section.key`` overrides.

    Relative ``out_dir`` values resolve against the config file's directory.
    Unknown sections or keys are rejected so typos do not pass silently.
    """
    values = {s: dict(v) for s, v in DEFAULTS.items()}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                _set(values, section, key, value)
        base = path.parent
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _set(values, section, key, value)
    cfg = RunConfig(values, base)
    validate(cfg)
    return cfg


def _set(values, section: str, key: str, value: str) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    values[section][key] = str(value)


def validate(cfg: RunConfig) -> None:
    cfg.seed
    if cfg.get("env", "kind") not in ("gridworld", "example1"):
        raise ConfigError("[env] kind must be gridworld or example1")
    for key in ("width", "height", "n_tasks", "horizon", "rollouts_per_task", "min_distance", "max_distance"):
        if cfg.int("env", key) < 1:
            raise ConfigError(f"[env] {key} must be >= 1")
    for key in ("slip_prob", "epsilon", "policy_noise", "threshold"):
        cfg.float("env", key)
    cfg.bool("env", "aliasing")
    if not 0.0 < cfg.float("split", "train_fraction") < 1.0:
        raise ConfigError("[split] train_fraction must lie in (0, 1)")
    if cfg.int("split", "unseen_task_count") < 0:
        raise ConfigError("[split] unseen_task_count must be >= 0")
    if cfg.get("predictor", "input_kind") not in INPUT_KINDS:
        raise ConfigError(f"[predictor] input_kind must be one of {', '.join(INPUT_KINDS)}")
    if cfg.get("predictor", "kind") not in ("recurrent", "feedforward"):
        raise ConfigError("[predictor] kind must be recurrent or feedforward")
    if cfg.int("predictor", "hidden") < 1 or cfg.int("predictor", "window") < 1:
        raise ConfigError("[predictor] hidden and window must be >= 1")
    if cfg.get("train", "loss") not in ("tdqc", "td_lambda", "bce", "mse_mc", "safe_cumulative"):
        raise ConfigError("[train] loss must be one of tdqc, td_lambda, bce, mse_mc, safe_cumulative")
    if not 0.0 <= cfg.float("train", "td_lambda") <= 1.0:
        raise ConfigError("[train] td_lambda must lie in [0, 1]")
    if cfg.float("train", "lr") <= 0 or any(v <= 0 for v in cfg.floats("train", "lr_grid")):
        raise ConfigError("[train] learning rates must be positive")
    if not 0.0 < cfg.float("train", "lr_gamma") <= 1.0:
        raise ConfigError("[train] lr_gamma must lie in (0, 1]")
    for key in ("lr_step", "target_update_period", "epochs", "eval_every"):
        if cfg.int("train", key) < 1:
            raise ConfigError(f"[train] {key} must be >= 1")
    for key in ("batch_rollouts",):
        if cfg.int("train", key) < 0:
            raise ConfigError(f"[train] {key} must be >= 0")
    if cfg.float("train", "weight_decay") < 0 or cfg.float("train", "l2_reg") < 0:
        raise ConfigError("[train] weight_decay and l2_reg must be >= 0")
    cfg.bool("train", "class_weighting")
    methods = cfg.words("eval", "methods")
    if not methods:
        raise ConfigError("[eval] methods must name at least one method")
    for m in methods:
        if m not in ("learned", "static", "constant", "oracle"):
            raise ConfigError(f"[eval] unknown method {m!r}")
    if any(not 0.0 <= q <= 1.0 for q in cfg.floats("eval", "quantiles")) or not cfg.floats("eval", "quantiles"):
        raise ConfigError("[eval] quantiles must be a non-empty list in [0, 1]")
    if cfg.int("eval", "bins") < 1:
        raise ConfigError("[eval] bins must be >= 1")
    for a in [cfg.float("conformal", "alpha")] + cfg.floats("conformal", "alpha_grid"):
        if not 0.0 < a < 1.0:
            raise ConfigError("[conformal] alpha values must lie in (0, 1)")
    if cfg.get("search", "scorer") not in ("oracle", "predictor"):
        raise ConfigError("[search] scorer must be oracle or predictor")
    samples = cfg.ints("search", "samples")
    if not samples or min(samples) < 1 or cfg.float("search", "tau") <= 0 or cfg.int("search", "episodes") < 1:
        raise ConfigError("[search] samples and episodes must be >= 1 and tau > 0")
    thresholds = cfg.floats("search", "thresholds")
    if not thresholds or any(math.isnan(t) for t in thresholds):
        raise ConfigError("[search] thresholds must be a non-empty list of numbers")
    cfg.bool("search", "baseline")
