"""Episode containers, JSONL persistence, task splits and static confidence baselines."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SCHEMA_VERSION = 1
_TOPK_TOL = 1e-6


class RolloutError(ValueError):
    """Invalid rollout data (parse failure or invariant violation)."""


def _as_vector(values, name: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in values)
    except TypeError as exc:
        raise RolloutError(f"{name}: expected a list of numbers") from exc
    if not all(math.isfinite(v) for v in out):
        raise RolloutError(f"{name}: non-finite value")
    return out


@dataclass(frozen=True)
class StepRecord:
    """One step of an episode as seen by a success predictor.

    ``chosen_probs`` holds, per action dimension, the probability the policy
    assigned to the executed token; ``top_k_probs`` (optional) holds the k
    largest token probabilities per dimension in descending order.
    """

    features: tuple[float, ...]
    reward: float = 0.0
    chosen_probs: tuple[float, ...] | None = None
    entropies: tuple[float, ...] | None = None
    top_k_probs: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", _as_vector(self.features, "features"))
        object.__setattr__(self, "reward", float(self.reward))
        if not math.isfinite(self.reward):
            raise RolloutError("reward: non-finite value")
        if self.chosen_probs is not None:
            probs = _as_vector(self.chosen_probs, "chosen_probs")
            if not all(0.0 < p <= 1.0 for p in probs):
                raise RolloutError("chosen_probs: values must lie in (0, 1]")
            object.__setattr__(self, "chosen_probs", probs)
        if self.entropies is not None:
            ent = _as_vector(self.entropies, "entropies")
            if any(h < 0.0 for h in ent):
                raise RolloutError("entropies: values must be non-negative")
            object.__setattr__(self, "entropies", ent)
        if self.top_k_probs is not None:
            rows = tuple(_as_vector(row, "top_k_probs") for row in self.top_k_probs)
            for row in rows:
                if any(a < b for a, b in zip(row, row[1:])):
                    raise RolloutError("top_k_probs: rows must be sorted descending")
                if sum(row) > 1.0 + _TOPK_TOL or any(p < 0.0 for p in row):
                    raise RolloutError("top_k_probs: rows must be non-negative and sum to <= 1")
            object.__setattr__(self, "top_k_probs", rows)

    def to_json(self) -> dict:
        out: dict = {"features": list(self.features)}
        if self.chosen_probs is not None:
            out["chosen_probs"] = list(self.chosen_probs)
        if self.entropies is not None:
            out["entropies"] = list(self.entropies)
        out["reward"] = self.reward
        if self.top_k_probs is not None:
            out["top_k_probs"] = [list(row) for row in self.top_k_probs]
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "StepRecord":
        if "features" not in obj or "reward" not in obj:
            raise RolloutError("step: 'features' and 'reward' are required")
        return cls(
            features=obj["features"],
            reward=obj["reward"],
            chosen_probs=obj.get("chosen_probs"),
            entropies=obj.get("entropies"),
            top_k_probs=obj.get("top_k_probs"),
        )


def label_from_rewards(rollout: "Rollout", c: float) -> int:
    """Binary success label: 1 iff the summed reward reaches threshold ``c``."""
    return int(sum(step.reward for step in rollout.steps) >= c)


@dataclass(frozen=True)
class Rollout:
    task_id: str
    steps: tuple[StepRecord, ...]
    label: int
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "task_id", str(self.task_id))
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in dict(self.meta).items()})
        if self.label not in (0, 1):
            raise RolloutError("label: must be 0 or 1")
        object.__setattr__(self, "label", int(self.label))
        if len(self.steps) < 1:
            raise RolloutError("steps: a rollout needs at least one step")
        if "threshold" in self.meta:
            expected = label_from_rewards(self, float(self.meta["threshold"]))
            if expected != self.label:
                raise RolloutError(
                    f"label: {self.label} disagrees with rewards at threshold {self.meta['threshold']}"
                )

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "label": self.label,
            "steps": [s.to_json() for s in self.steps],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Rollout":
        version = obj.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise RolloutError(f"schema_version: unsupported version {version!r}")
        for key in ("task_id", "label", "steps"):
            if key not in obj:
                raise RolloutError(f"{key}: missing")
        return cls(
            task_id=obj["task_id"],
            steps=tuple(StepRecord.from_json(s) for s in obj["steps"]),
            label=obj["label"],
            meta=obj.get("meta", {}),
        )


@dataclass(frozen=True)
class Dataset:
    rollouts: tuple[Rollout, ...]
    task_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        rollouts = tuple(self.rollouts)
        if not rollouts:
            raise RolloutError("dataset: must contain at least one rollout")
        ids = frozenset(self.task_ids) or frozenset(r.task_id for r in rollouts)
        missing = {r.task_id for r in rollouts} - ids
        if missing:
            raise RolloutError(f"task_ids: rollouts reference unknown tasks {sorted(missing)}")
        object.__setattr__(self, "rollouts", rollouts)
        object.__setattr__(self, "task_ids", ids)

    def __len__(self) -> int:
        return len(self.rollouts)

    def __iter__(self):
        return iter(self.rollouts)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rollouts], dtype=int)

    def by_task(self) -> dict[str, list[Rollout]]:
        groups: dict[str, list[Rollout]] = {t: [] for t in sorted(self.task_ids)}
        for r in self.rollouts:
            groups[r.task_id].append(r)
        return groups

    def subset(self, rollouts: Iterable[Rollout]) -> "Dataset":
        rollouts = tuple(rollouts)
        return Dataset(rollouts, frozenset(r.task_id for r in rollouts))


def load_rollouts(path) -> Dataset:
    """Read a JSONL rollout file, validating every record."""
    rollouts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RolloutError(f"line {lineno}: parse error: {exc.msg}") from exc
            try:
                rollouts.append(Rollout.from_json(obj))
            except RolloutError as exc:
                raise RolloutError(f"rollout {len(rollouts)} (line {lineno}): {exc}") from exc
    if not rollouts:
        raise RolloutError(f"{path}: empty dataset")
    return Dataset(tuple(rollouts))


def save_rollouts(dataset: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.rollouts:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")))
            fh.write("\n")


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    unseen_task_count: int
    train_fraction: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.unseen_task_count < 0:
            raise ValueError("unseen_task_count must be non-negative")


def split_by_task(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Hold out whole tasks as unseen, then split the remaining tasks' rollouts.

    Within a seen task the rollouts are split per label class so that both
    outcomes reach the training shard whenever the task has both.
    """
    tasks = sorted(dataset.task_ids)
    if spec.unseen_task_count >= len(tasks):
        raise RolloutError(
            f"split: {len(tasks)} tasks cannot leave {spec.unseen_task_count} unseen plus a seen task"
        )
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(tasks))
    unseen = {tasks[i] for i in order[: spec.unseen_task_count]}

    groups = dataset.by_task()
    train, val_seen, val_unseen = [], [], []
    for task in tasks:
        members = groups[task]
        if task in unseen:
            val_unseen.extend(members)
            continue
        for label in (1, 0):
            cls = [r for r in members if r.label == label]
            if not cls:
                continue
            perm = rng.permutation(len(cls))
            n_train = max(1, int(round(spec.train_fraction * len(cls))))
            if n_train == len(cls) and len(cls) > 1:
                n_train -= 1
            train.extend(cls[i] for i in sorted(perm[:n_train]))
            val_seen.extend(cls[i] for i in sorted(perm[n_train:]))
    if not val_seen:
        raise RolloutError("split: seen tasks have too few rollouts for a validation shard")
    out = [dataset.subset(part) for part in (train, val_seen)]
    if val_unseen:
        out.append(dataset.subset(val_unseen))
    else:
        out.append(None)
    return out[0], out[1], out[2]


def time_quantile_index(rollout: Rollout | int, q: float) -> int:
    """1-based step index at normalised time ``q``; q=0 maps to the first step."""
    horizon = rollout if isinstance(rollout, (int, np.integer)) else rollout.horizon
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return int(min(max(math.ceil(q * horizon), 1), horizon))


class StaticMethod(str, Enum):
    MAX_PROB = "MaxProb"
    AVG_PROB = "AvgProb"
    RUNNING_AVG_PROB = "RunningAvgProb"
    AVG_ENTROPY = "AvgEntropy"
    RUNNING_AVG_ENTROPY = "RunningAvgEntropy"


def _step_field(step: StepRecord, name: str) -> tuple[float, ...]:
    values = getattr(step, name)
    if values is None:
        raise RolloutError(f"static score needs '{name}' on every step")
    return values


def static_score(rollout: Rollout, method: StaticMethod | str, t: int) -> float:
    """Uncertainty score of a non-learned baseline at step ``t`` (larger = less confident)."""
    method = StaticMethod(method)
    if not 1 <= t <= rollout.horizon:
        raise ValueError(f"t={t} outside 1..{rollout.horizon}")
    steps = rollout.steps
    if method is StaticMethod.MAX_PROB:
        return max(-math.log(p) for p in _step_field(steps[t - 1], "chosen_probs"))
    if method is StaticMethod.AVG_PROB:
        return _avg_neglog(steps[t - 1])
    if method is StaticMethod.RUNNING_AVG_PROB:
        return sum(_avg_neglog(s) for s in steps[:t]) / t
    if method is StaticMethod.AVG_ENTROPY:
        return _avg_entropy(steps[t - 1])
    return sum(_avg_entropy(s) for s in steps[:t]) / t


def _avg_neglog(step: StepRecord) -> float:
    probs = _step_field(step, "chosen_probs")
    return -sum(math.log(p) for p in probs) / len(probs)


def _avg_entropy(step: StepRecord) -> float:
    ent = _step_field(step, "entropies")
    return sum(ent) / len(ent)


def static_scores(rollout: Rollout, method: StaticMethod | str) -> np.ndarray:
    """Per-step static scores for t = 1..T."""
    return np.array([static_score(rollout, method, t) for t in range(1, rollout.horizon + 1)])


def static_success_scores(rollout: Rollout, method: StaticMethod | str) -> np.ndarray:
    """Map static uncertainty scores to [0, 1] success scores via exp(-score).

    For the probability methods this is the (geometric) mean confidence of the
    executed tokens; for a single action dimension AvgProb becomes the raw
    chosen probability.
    """
    return np.exp(-static_scores(rollout, method))

