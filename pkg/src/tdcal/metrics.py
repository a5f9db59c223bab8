"""Sequential calibration and ranking metrics.

Scores entering this module are success probabilities; ranking metrics
flip them to failure scores ``1 - f`` so that failed rollouts should rank
higher.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .rollout import time_quantile_index

DEFAULT_QUANTILES = (0.0, 0.2, 0.4, 0.6, 0.8)
DEFAULT_BINS = 10


@dataclass(frozen=True)
class ScoredRollout:
    scores: np.ndarray  # per-step success probabilities
    label: int
    task_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1 or len(s) < 1:
            raise ValueError("scores must be a non-empty vector")
        object.__setattr__(self, "scores", s)

    @property
    def horizon(self) -> int:
        return len(self.scores)


def scores_at_quantile(scored: Sequence[ScoredRollout], q: float) -> tuple[np.ndarray, np.ndarray]:
    f = np.array([s.scores[time_quantile_index(s.horizon, q) - 1] for s in scored])
    y = np.array([s.label for s in scored], dtype=float)
    return f, y


def sequential_brier(scored: Sequence[ScoredRollout], q: float) -> float:
    if not scored:
        raise ValueError("no rollouts to score")
    f, y = scores_at_quantile(scored, q)
    return float(np.mean((f - y) ** 2))


def _bin_index(scores: np.ndarray, bins) -> np.ndarray:
    if bins == "exact":
        return np.unique(scores, return_inverse=True)[1].ravel()
    k = int(bins)
    if k < 1:
        raise ValueError("bins must be >= 1")
    # equal-width bins on [0, 1]; a score of exactly 1 joins the top bin
    return np.minimum((scores * k).astype(int), k - 1)


def brier_decomposition(scores, labels, bins=DEFAULT_BINS) -> tuple[float, float, float]:
    """Split the Brier score into (calibration, refinement, total).

    ``bins="exact"`` groups by unique score value, where the two terms add up
    to the total exactly; with equal-width bins the sum is approximate.
    """
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(f) == 0:
        raise ValueError("empty input")
    idx = _bin_index(f, bins)
    n_bins = idx.max() + 1
    n_k = np.bincount(idx, minlength=n_bins).astype(float)
    occupied = n_k > 0
    f_bar = np.bincount(idx, weights=f, minlength=n_bins)[occupied] / n_k[occupied]
    y_bar = np.bincount(idx, weights=y, minlength=n_bins)[occupied] / n_k[occupied]
    n = n_k[occupied]
    N = len(f)
    calibration = float(np.sum(n * (f_bar - y_bar) ** 2) / N)
    refinement = float(np.sum(n * y_bar * (1.0 - y_bar)) / N)
    total = float(np.mean((f - y) ** 2))
    return calibration, refinement, total


def ece(scores, labels, bins: int = DEFAULT_BINS) -> float:
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(f) == 0:
        raise ValueError("empty input")
    idx = _bin_index(f, bins)
    n_k = np.bincount(idx, minlength=bins).astype(float)
    occupied = n_k > 0
    gap = np.abs(np.bincount(idx, weights=f - y, minlength=bins)[occupied])
    return float(np.sum(gap) / len(f))


def roc_auc(failure_scores, labels) -> float:
    """Probability that a random failure outranks a random success (ties count 1/2).

    ``labels`` are success labels: 1 = success, 0 = failure.
    """
    s = np.asarray(failure_scores, dtype=float)
    y = np.asarray(labels)
    fail = y == 0
    n_f, n_s = int(fail.sum()), int((~fail).sum())
    if n_f == 0 or n_s == 0:
        raise ValueError("ROC-AUC needs both labels present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[fail].sum() - n_f * (n_f + 1) / 2.0
    return float(u / (n_f * n_s))


def fixed_cutoff_scores(scored: Sequence[ScoredRollout]) -> np.ndarray:
    """Max failure score up to the shortest rollout length of each rollout's task."""
    cutoff: dict[str, int] = {}
    for s in scored:
        cutoff[s.task_id] = min(cutoff.get(s.task_id, s.horizon), s.horizon)
    return np.array([np.max(1.0 - s.scores[: cutoff[s.task_id]]) for s in scored])


def spearman(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    if len(x) < 2:
        raise ValueError("need at least two points")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / denom) if denom > 0 else float("nan")


@dataclass
class MetricReport:
    method: str
    split: str
    brier_by_quantile: dict = field(default_factory=dict)
    calibration_term: float = float("nan")
    refinement_term: float = float("nan")
    ece: float = float("nan")
    roc_auc: float = float("nan")
    baseline_brier: float = float("nan")
    bins: int = DEFAULT_BINS


def evaluate(scored: Sequence[ScoredRollout], method: str, split: str,
             quantiles=DEFAULT_QUANTILES, bins: int = DEFAULT_BINS) -> MetricReport:
    """Brier per quantile, decomposition and ECE pooled over quantiles, fixed-cutoff AUC.

    The constant baseline predicts the split's success rate p and scores
    p(1 - p) at every quantile.
    """
    rep = MetricReport(method, split, bins=bins)
    pooled_f, pooled_y = [], []
    for q in quantiles:
        f, y = scores_at_quantile(scored, q)
        rep.brier_by_quantile[float(q)] = float(np.mean((f - y) ** 2))
        pooled_f.append(f)
        pooled_y.append(y)
    f, y = np.concatenate(pooled_f), np.concatenate(pooled_y)
    rep.calibration_term, rep.refinement_term, _ = brier_decomposition(f, y, bins)
    rep.ece = ece(f, y, bins)
    labels = np.array([s.label for s in scored])
    p = labels.mean()
    rep.baseline_brier = float(p * (1.0 - p))
    if 0 < labels.sum() < len(labels):
        rep.roc_auc = roc_auc(fixed_cutoff_scores(scored), labels)
    return rep


REPORT_COLUMNS = ("method", "split", "quantile", "brier", "ece", "auc", "calibration", "refinement", "baseline_brier")


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.10g}"


def reports_to_csv(reports: Sequence[MetricReport], meta: Mapping[str, str] | None = None) -> str:
    """One row per (method, split, quantile); summary columns repeat across quantiles."""
    buf = io.StringIO()
    if meta:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        for q, b in r.brier_by_quantile.items():
            w.writerow([r.method, r.split, f"{q:g}", _fmt(b), _fmt(r.ece), _fmt(r.roc_auc),
                        _fmt(r.calibration_term), _fmt(r.refinement_term), _fmt(r.baseline_brier)])
    return buf.getvalue()
