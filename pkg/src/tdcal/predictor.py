"""Trainable success predictors with hand-written reverse-mode gradients.

Two architectures share one batch interface:

* ``FeedforwardPredictor``: a window of the last ``window`` steps' inputs
  (left zero-padded) through two rectifier layers and a logistic output.
* ``RecurrentPredictor``: linear input projection, one gated recurrent cell
  whose state is reset at the start of every episode, linear head, logistic
  output.

Both consume a padded batch ``X`` [B, T, d] and return per-step outputs
[B, T]; padded steps after an episode's end never influence earlier outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from ._gru_py import sigmoid
from .rollout import Rollout, RolloutError

FORMAT_VERSION = 1
INPUT_KINDS = ("features", "probs", "topk", "probs+topk", "all")


class PredictorFormatError(ValueError):
    """Predictor file has the wrong version, kind or layout."""


def encode_steps(rollout: Rollout, input_kind: str) -> np.ndarray:
    """Per-step input vectors [T, d] for the chosen input family.

    ``probs`` is the black-box view (chosen-token probabilities and
    entropies); ``topk`` flattens the top-k token probabilities; ``features``
    are the raw per-step feature vectors.
    """
    rows = []
    for step in rollout.steps:
        parts: list[Sequence[float]] = []
        if input_kind in ("features", "all"):
            parts.append(step.features)
        if input_kind in ("probs", "probs+topk", "all"):
            if step.chosen_probs is None or step.entropies is None:
                raise RolloutError(f"input kind {input_kind!r} needs chosen_probs and entropies")
            parts += [step.chosen_probs, step.entropies]
        if input_kind in ("topk", "probs+topk", "all"):
            if step.top_k_probs is None:
                raise RolloutError(f"input kind {input_kind!r} needs top_k_probs")
            parts += list(step.top_k_probs)
        if not parts:
            raise ValueError(f"unknown input kind {input_kind!r}")
        rows.append(np.concatenate([np.asarray(p, dtype=float) for p in parts]))
    return np.stack(rows)


@dataclass
class Batch:
    X: np.ndarray  # [B, T, d], zero beyond each length
    lengths: np.ndarray  # [B]
    labels: np.ndarray  # [B]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.X.shape[1])[None, :] < self.lengths[:, None]


def make_batch(sequences: Sequence[np.ndarray], labels: Sequence[int] | None = None) -> Batch:
    lengths = np.array([len(s) for s in sequences], dtype=int)
    d = sequences[0].shape[1]
    X = np.zeros((len(sequences), lengths.max(), d))
    for i, s in enumerate(sequences):
        X[i, : len(s)] = s
    labels = np.zeros(len(sequences)) if labels is None else np.asarray(labels, dtype=float)
    return Batch(X, lengths, labels)


def _uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Predictor:
    """Shared plumbing: named parameters, encoding, batching and persistence."""

    kind = "base"

    def __init__(self, input_dim: int, hidden: int, input_kind: str = "features", accumulate: bool = False):
        if input_dim < 1 or hidden < 1:
            raise ValueError("input_dim and hidden must be >= 1")
        if input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.input_kind = input_kind
        self.accumulate = bool(accumulate)
        self.params: dict[str, np.ndarray] = {}

    # -- parameters
    def shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def arch(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "input_kind": self.input_kind,
            "accumulate": self.accumulate,
        }

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.shapes()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            self.params[name] = flat[pos : pos + size].reshape(shape).copy()
            pos += size

    def copy(self) -> "Predictor":
        other = type(self)(**self.arch())
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- evaluation
    def encode(self, rollout: Rollout) -> np.ndarray:
        X = encode_steps(rollout, self.input_kind)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"feature dimension {X.shape[1]} does not match predictor input {self.input_dim}")
        return X

    def batch(self, rollouts: Sequence[Rollout]) -> Batch:
        return make_batch([self.encode(r) for r in rollouts], [r.label for r in rollouts])

    def forward_batch(self, X: np.ndarray):
        """Per-step logistic outputs [B, T] and a cache for ``backward_batch``."""
        raise NotImplementedError

    def backward_batch(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def scores(self, outputs: np.ndarray) -> np.ndarray:
        """Map per-step outputs to reported scores (running sum in accumulate mode)."""
        return np.cumsum(outputs, axis=-1) if self.accumulate else outputs

    def predict(self, rollout: Rollout) -> np.ndarray:
        out, _ = self.forward_batch(self.encode(rollout)[None])
        return self.scores(out[0])

    def predict_many(self, rollouts: Sequence[Rollout]) -> list[np.ndarray]:
        if not rollouts:
            return []
        b = self.batch(rollouts)
        out, _ = self.forward_batch(b.X)
        out = self.scores(out)
        return [out[i, :n].copy() for i, n in enumerate(b.lengths)]


class FeedforwardPredictor(Predictor):
    kind = "feedforward"

    def __init__(self, input_dim: int, hidden: int = 32, window: int = 1, input_kind: str = "features",
                 accumulate: bool = False):
        super().__init__(input_dim, hidden, input_kind, accumulate)
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)

    def arch(self) -> dict:
        return {**super().arch(), "window": self.window}

    def shapes(self):
        din, H = self.input_dim * self.window, self.hidden
        return {"W1": (H, din), "b1": (H,), "W2": (H, H), "b2": (H,), "W3": (1, H), "b3": (1,)}

    def init(self, rng: np.random.Generator) -> None:
        for name, shape in self.shapes().items():
            self.params[name] = np.zeros(shape) if name[0] == "b" else _uniform(rng, shape, shape[1], shape[0])

    def windowed(self, X: np.ndarray) -> np.ndarray:
        B, T, d = X.shape
        w = self.window
        padded = np.concatenate([np.zeros((B, w - 1, d)), X], axis=1)
        # oldest step first, current step last
        return np.concatenate([padded[:, k : k + T] for k in range(w)], axis=2)

    def forward_batch(self, X):
        p = self.params
        Z = self.windowed(X)
        a1 = np.maximum(Z @ p["W1"].T + p["b1"], 0.0)
        a2 = np.maximum(a1 @ p["W2"].T + p["b2"], 0.0)
        out = sigmoid(a2 @ p["W3"][0] + p["b3"][0])
        return out, (Z, a1, a2, out)

    def backward_batch(self, cache, dout):
        Z, a1, a2, out = cache
        p = self.params
        dlogit = dout * out * (1.0 - out)  # [B, T]
        g = {"W3": np.einsum("bt,bth->h", dlogit, a2)[None], "b3": np.array([dlogit.sum()])}
        da2 = dlogit[..., None] * p["W3"][0] * (a2 > 0)
        g["W2"] = np.einsum("bti,btj->ij", da2, a1)
        g["b2"] = da2.sum(axis=(0, 1))
        da1 = (da2 @ p["W2"]) * (a1 > 0)
        g["W1"] = np.einsum("bti,btj->ij", da1, Z)
        g["b1"] = da1.sum(axis=(0, 1))
        return g


class RecurrentPredictor(Predictor):
    kind = "recurrent"

    def __init__(self, input_dim: int, hidden: int = 32, proj: int | None = None, input_kind: str = "features",
                 accumulate: bool = False):
        super().__init__(input_dim, hidden, input_kind, accumulate)
        self.proj = int(proj) if proj else self.hidden

    def arch(self) -> dict:
        return {**super().arch(), "proj": self.proj}

    def shapes(self):
        d, P, H = self.input_dim, self.proj, self.hidden
        return {
            "Wp": (P, d), "bp": (P,),
            "Wx": (3 * H, P), "bx": (3 * H,),
            "Wh": (3 * H, H), "bh": (3 * H,),
            "Wo": (1, H), "bo": (1,),
        }

    def init(self, rng: np.random.Generator) -> None:
        H = self.hidden
        for name, shape in self.shapes().items():
            if name[0] == "b":
                self.params[name] = np.zeros(shape)
            elif name in ("Wx", "Wh"):
                # each gate block is its own [H, fan_in] matrix
                self.params[name] = _uniform(rng, shape, shape[1], H)
            else:
                self.params[name] = _uniform(rng, shape, shape[1], shape[0])

    def forward_batch(self, X):
        p = self.params
        U = X @ p["Wp"].T + p["bp"]
        hs, gates, hn = kernels.gru_forward(U, p["Wx"], p["Wh"], p["bx"], p["bh"])
        out = sigmoid(hs @ p["Wo"][0] + p["bo"][0])
        return out, (X, U, hs, gates, hn, out)

    def backward_batch(self, cache, dout):
        X, U, hs, gates, hn, out = cache
        p = self.params
        dlogit = dout * out * (1.0 - out)
        g = {"Wo": np.einsum("bt,bth->h", dlogit, hs)[None], "bo": np.array([dlogit.sum()])}
        dhs = dlogit[..., None] * p["Wo"][0]
        dU, g["Wx"], g["Wh"], g["bx"], g["bh"] = kernels.gru_backward(U, p["Wx"], p["Wh"], hs, gates, hn, dhs)
        g["Wp"] = np.einsum("bti,btj->ij", dU, X)
        g["bp"] = dU.sum(axis=(0, 1))
        return g


KINDS = {"feedforward": FeedforwardPredictor, "recurrent": RecurrentPredictor}


def init(kind: str, input_dim: int, seed: int, *, zero: bool = False, **arch) -> Predictor:
    """Build a predictor with seeded uniform fan-in/fan-out weights and zero biases.

    ``zero=True`` sets every parameter to 0 (output exactly 0.5), a test hook.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    model = KINDS[kind](input_dim=input_dim, **arch)
    if zero:
        model.params = {k: np.zeros(s) for k, s in model.shapes().items()}
    else:
        model.init(np.random.default_rng(seed))
    return model


def forward(predictor: Predictor, rollout: Rollout, t: int) -> float:
    """Score of the history prefix ending at step ``t`` (1-based)."""
    if not 1 <= t <= rollout.horizon:
        raise ValueError(f"t={t} outside 1..{rollout.horizon}")
    X = predictor.encode(rollout)[:t]
    out, _ = predictor.forward_batch(X[None])
    return float(predictor.scores(out[0])[-1])


LossFn = Callable[[np.ndarray, Batch], tuple[float, np.ndarray]]


def gradients(predictor: Predictor, batch: Batch, loss_fn: LossFn) -> tuple[float, dict[str, np.ndarray]]:
    """Value and exact gradient of ``loss_fn`` w.r.t. every parameter.

    ``loss_fn(scores, batch)`` receives the reported per-step scores [B, T]
    (running sums in accumulate mode) and returns ``(value, dvalue/dscores)``.
    Gradient entries beyond each episode's length are ignored.
    """
    out, cache = predictor.forward_batch(batch.X)
    value, dscores = loss_fn(predictor.scores(out), batch)
    dscores = np.where(batch.mask, dscores, 0.0)
    if predictor.accumulate:
        # adjoint of the running sum: reverse cumulative sum
        dscores = np.cumsum(dscores[:, ::-1], axis=1)[:, ::-1]
    return float(value), predictor.backward_batch(cache, dscores)


def success_scores(predictor: Predictor, rollouts: Sequence[Rollout]) -> list[np.ndarray]:
    """Per-step success probabilities for every rollout.

    Accumulate-mode predictors report a running failure sum F_t in [0, t];
    it is mapped to a success probability as 1 - F_t / t.
    """
    scores = predictor.predict_many(rollouts)
    if predictor.accumulate:
        scores = [1.0 - s / np.arange(1, len(s) + 1) for s in scores]
    return scores


# --------------------------------------------------------------------------- optimisation


@dataclass
class OptimizerState:
    """AdamW moments plus hyperparameters."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict | None = None
    v: dict | None = None


def optimizer_step(state: OptimizerState, predictor: Predictor, grads: dict[str, np.ndarray]):
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    if state.m is None:
        state.m = {k: np.zeros_like(v) for k, v in predictor.params.items()}
        state.v = {k: np.zeros_like(v) for k, v in predictor.params.items()}
    for name, value in predictor.params.items():
        if grads[name].shape != value.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {grads[name].shape} vs {value.shape}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, value in predictor.params.items():
        g = grads[name]
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        value *= 1.0 - state.lr * state.weight_decay
        value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return predictor, state


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: the rate is multiplied by ``gamma`` every ``step_size`` epochs."""

    base: float
    step_size: int = 200
    gamma: float = 1.0

    def __post_init__(self):
        if self.base <= 0 or not 0 < self.gamma <= 1 or self.step_size < 1:
            raise ValueError("invalid learning-rate schedule")

    def rate(self, epoch: int) -> float:
        return self.base * self.gamma ** (epoch // self.step_size)


# --------------------------------------------------------------------------- persistence


def save_predictor(predictor: Predictor, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": predictor.kind,
        "arch": predictor.arch(),
        "param_order": list(predictor.shapes()),
        "shapes": {k: list(s) for k, s in predictor.shapes().items()},
        "params": predictor.flat().tolist(),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_predictor(path, kind: str | None = None) -> Predictor:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PredictorFormatError(f"{path}: not a predictor file") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise PredictorFormatError(f"{path}: unsupported format version {doc.get('format_version')!r}")
    if doc.get("kind") not in KINDS:
        raise PredictorFormatError(f"{path}: unknown predictor kind {doc.get('kind')!r}")
    if kind is not None and doc["kind"] != kind:
        raise PredictorFormatError(f"{path}: expected a {kind} predictor, found {doc['kind']}")
    model = KINDS[doc["kind"]](**doc["arch"])
    if doc["param_order"] != list(model.shapes()):
        raise PredictorFormatError(f"{path}: parameter layout does not match the architecture")
    model.set_flat(np.array(doc["params"], dtype=float))
    return model
