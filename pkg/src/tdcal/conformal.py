"""Split-conformal upper band on failure-score trajectories, and the early-stop monitor.

Bands are fitted on failure scores ``S(t) = 1 - f(h_t)`` of successful
rollouts, so a fresh successful rollout stays below ``delta_t`` at every
step with probability at least ``1 - alpha``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS_MODULATION = 1e-8


@dataclass(frozen=True)
class ConformalBand:
    alpha: float
    mu: np.ndarray
    s: np.ndarray
    h: float
    delta: np.ndarray
    n1: int = 0
    n2: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not len(self.mu) == len(self.s) == len(self.delta) >= 1:
            raise ValueError("band arrays must share one horizon")
        if np.any(self.s <= 0):
            raise ValueError("modulation must be positive")

    @property
    def horizon(self) -> int:
        return len(self.delta)

    def threshold(self, t: int) -> float:
        """delta at 1-based step ``t``; steps past the horizon reuse the last value."""
        if t > self.horizon:
            warnings.warn(f"step {t} beyond band horizon {self.horizon}; holding the last threshold", stacklevel=2)
            return float(self.delta[-1])
        return float(self.delta[t - 1])

    def extended(self, T: int) -> np.ndarray:
        if T <= self.horizon:
            return self.delta[:T]
        return np.concatenate([self.delta, np.full(T - self.horizon, self.delta[-1])])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# alpha={self.alpha!r} h={self.h!r} N1={self.n1} N2={self.n2} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mu", "s", "delta"])
        for t in range(self.horizon):
            w.writerow([t + 1, repr(float(self.mu[t])), repr(float(self.s[t])), repr(float(self.delta[t]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConformalBand":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = {}
        for ln in lines:
            if ln.startswith("#"):
                for tok in ln[1:].split():
                    k, _, v = tok.partition("=")
                    header[k] = v
        body = [ln for ln in lines if not ln.startswith("#")]
        rows = list(csv.reader(body))[1:]
        arr = np.array([[float(x) for x in r[1:]] for r in rows])
        return cls(float(header["alpha"]), arr[:, 0], arr[:, 1], float(header["h"]), arr[:, 2],
                   int(header.get("N1", 0)), int(header.get("N2", 0)), int(header.get("seed", 0)))


def pad_hold(sequences: Sequence[Sequence[float]], T: int | None = None) -> np.ndarray:
    """Stack ragged sequences into [N, T], extending each by holding its last value."""
    T = T or max(len(s) for s in sequences)
    out = np.empty((len(sequences), T))
    for i, s in enumerate(sequences):
        s = np.asarray(s, dtype=float)[:T]
        out[i, : len(s)] = s
        out[i, len(s) :] = s[-1]
    return out


def order_statistic(values: np.ndarray, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest value, clamped to the largest."""
    n = len(values)
    k = min(max(math.ceil((n + 1) * (1.0 - alpha)), 1), n)
    return float(np.sort(values)[k - 1])


def fit_band_split(cal_a: np.ndarray, cal_b: np.ndarray, alpha: float, seed: int = 0) -> ConformalBand:
    """Fit the band from an explicit split of padded failure-score arrays [N, T]."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    A = np.asarray(cal_a, dtype=float)
    Bm = np.asarray(cal_b, dtype=float)
    n1, n2 = len(A), len(Bm)
    if n1 < 1 or n2 < 1:
        raise ValueError("both calibration halves must be non-empty")
    mu = A.mean(axis=0)
    M = np.max(np.abs(A - mu), axis=1)
    if (n1 + 1) * (1.0 - alpha) > n1:
        keep = np.ones(n1, dtype=bool)
    else:
        keep = M <= order_statistic(M, alpha)
    s = np.maximum(np.max(np.abs(A[keep] - mu), axis=0), EPS_MODULATION)
    D = np.max((Bm - mu) / s, axis=1)
    h = order_statistic(D, alpha)
    return ConformalBand(alpha, mu, s, h, mu + h * s, n1, n2, seed)


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def fit_band(failure_scores: Sequence[Sequence[float]], alpha: float, split_seed: int = 0,
             horizon: int | None = None) -> ConformalBand:
    """Seeded half/half split of the calibration sequences, then ``fit_band_split``."""
    if len(failure_scores) < 4:
        raise ValueError("need at least 4 calibration sequences")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    S = pad_hold(failure_scores, horizon)
    ia, ib = split_indices(len(S), split_seed)
    return fit_band_split(S[ia], S[ib], alpha, split_seed)


def first_crossing(band: ConformalBand, failure_scores: Sequence[float]) -> int | None:
    """1-based first step whose failure score exceeds the threshold, else None."""
    S = np.asarray(failure_scores, dtype=float)
    above = np.nonzero(S > band.extended(len(S)))[0]
    return int(above[0]) + 1 if len(above) else None


def early_stop_monitor(band: ConformalBand, score_fn: Callable[[int], float], horizon: int) -> int | None:
    """Stream a live episode: ``score_fn(t)`` returns the success score f(h_t).

    Returns the first step with ``1 - f(h_t) > delta_t`` or None at episode end.
    """
    for t in range(1, horizon + 1):
        if 1.0 - score_fn(t) > band.threshold(t):
            return t
    return None


def coverage_eval(band: ConformalBand, failure_scores: Sequence[Sequence[float]]) -> float:
    """Fraction of sequences staying at or below the band at every step."""
    if not failure_scores:
        raise ValueError("no sequences")
    ok = [np.max(np.asarray(s) - band.extended(len(s))) <= 0 for s in failure_scores]
    return float(np.mean(ok))


def tpr_fpr_sweep(fit_scores: Sequence[Sequence[float]], test_scores: Sequence[Sequence[float]],
                  test_labels: Sequence[int], alphas: Sequence[float], split_seed: int = 0):
    """Per-alpha (alpha, TPR, FPR): flagged fraction among failures and among successes."""
    y = np.asarray(test_labels)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("test set needs both labels")
    rows = []
    for a in alphas:
        band = fit_band(fit_scores, a, split_seed)
        flagged = np.array([first_crossing(band, s) is not None for s in test_scores])
        rows.append((float(a), float(flagged[y == 0].mean()), float(flagged[y == 1].mean())))
    return rows
