"""Test-time action search guided by a success predictor.

At each step the policy's greedy action is executed unless the predictor's
failure confidence for it exceeds the threshold; then M candidate actions
are drawn from the tempered policy, each is simulated one step ahead from
the true state, and the candidate whose continuation (greedy next action)
scores highest is executed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .envsim import (
    OracleTables,
    TabularPOMDP,
    TabularPolicy,
    _sample,
    extend_history,
    history_actions,
    history_observations,
    history_rewards,
    make_step,
    one_step_lookahead,
)
from .predictor import Predictor, forward
from .rollout import Rollout

GREEDY_TAU = 1e-6  # temperatures at or below this are the argmax limit

# scorer(history ending in x_t, candidate a_t) -> success score of (h_t, a_t)
Scorer = Callable[[tuple, int], float]


@dataclass(frozen=True)
class SearchConfig:
    samples: int = 10
    threshold: float = -math.inf  # failure-confidence gate; -inf always searches
    tau: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def tempered(probs: np.ndarray, tau: float) -> np.ndarray:
    """softmax(log p / tau); zero-probability actions stay at zero."""
    p = np.asarray(probs, dtype=float)
    if not np.any(p > 0):
        raise ValueError("distribution has no support")
    if tau <= GREEDY_TAU:
        out = np.zeros_like(p)
        out[int(np.argmax(p))] = 1.0
        return out
    logits = np.full(p.shape, -np.inf)
    logits[p > 0] = np.log(p[p > 0]) / tau
    w = np.exp(logits - logits.max())
    return w / w.sum()


def sample_with_temperature(probs, tau: float, seed=None) -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _sample(tempered(probs, tau), rng)


def oracle_scorer(tables: OracleTables) -> Scorer:
    return tables.success_q


def predictor_scorer(predictor: Predictor, env: TabularPOMDP, policy: TabularPolicy) -> Scorer:
    """Score (h_t, a_t) by running ``predictor`` on the rollout prefix it defines."""

    def score(history: tuple, action: int) -> float:
        obs = history_observations(history)
        acts = history_actions(history) + [action]
        rews = history_rewards(history) + [0.0]
        steps = []
        for t in range(len(obs)):
            dist = policy.probs(obs[: t + 1])
            # an action outside the policy's support still needs a valid record
            dist = np.where(dist > 0, dist, 1e-12)
            steps.append(make_step(env, obs[t], acts[t], dist, rews[t]))
        prefix = Rollout(task_id=env.name, steps=tuple(steps), label=0)
        return forward(predictor, prefix, len(steps))

    return score


@dataclass
class SearchEpisode:
    success: bool
    length: int  # steps until the return first reaches c, else the horizon
    search_steps: int
    actions: list


def guided_action_search(env: TabularPOMDP, state: int, history: tuple, policy: TabularPolicy,
                         f: Scorer, cfg: SearchConfig, rng: np.random.Generator,
                         final_step: bool = False) -> tuple[int, bool]:
    """Pick the action at the current step; returns (action, search_was_triggered).

    On the final step there is no next decision to score, so candidates are
    scored directly as f(h_t, a).
    """
    obs = history_observations(history)
    probs = policy.probs(obs)
    greedy = int(np.argmax(probs))
    if 1.0 - f(history, greedy) <= cfg.threshold:
        return greedy, False
    dist = tempered(probs, cfg.tau)
    best, best_score = -1, -math.inf
    for _ in range(cfg.samples):
        a = _sample(dist, rng)
        if final_step:
            score = f(history, a)
        else:
            _, x_next, r = one_step_lookahead(env, state, a, rng)
            h_next = extend_history(history, a, r, x_next)
            score = f(h_next, policy.greedy(history_observations(h_next)))
        if score > best_score:
            best, best_score = a, score
    return best, True


def run_guided_episode(env: TabularPOMDP, policy: TabularPolicy, f: Scorer, cfg: SearchConfig,
                       c: float, episode: int) -> SearchEpisode:
    """One episode; real transitions and search draws use separate seeded streams."""
    env_rng = np.random.default_rng((cfg.seed, episode, 0))
    search_rng = np.random.default_rng((cfg.seed, episode, 1))
    state = _sample(env.initial_state_dist, env_rng)
    history: tuple = (_sample(env.observation[state], env_rng),)
    ret, length, n_search, actions = 0.0, env.horizon, 0, []
    for t in range(env.horizon):
        a, searched = guided_action_search(env, state, history, policy, f, cfg, search_rng,
                                           final_step=t == env.horizon - 1)
        n_search += searched
        actions.append(a)
        state, obs, r = one_step_lookahead(env, state, a, env_rng)
        ret += r
        if t == env.horizon - 1:
            ret += float(env.terminal_reward[state])
        if ret >= c and length == env.horizon:
            length = t + 1
        history = extend_history(history, a, r, obs)
    return SearchEpisode(ret >= c, length, n_search, actions)


def run_greedy_episode(env: TabularPOMDP, policy: TabularPolicy, c: float, seed: int, episode: int) -> SearchEpisode:
    """Baseline: always execute the policy's most likely action (same environment stream)."""
    cfg = SearchConfig(samples=1, threshold=math.inf, tau=1.0, seed=seed)
    return run_guided_episode(env, policy, lambda h, a: 1.0, cfg, c, episode)


SEARCH_COLUMNS = ("task", "M", "tau", "threshold", "success_rate", "mean_len", "search_steps")


def run_search_experiment(tasks: Sequence[tuple[TabularPOMDP, TabularPolicy]],
                          scorers: Sequence[Scorer], configs: Sequence[SearchConfig | None],
                          n_episodes: int, c: float = 1.0) -> list[dict]:
    """Success rate, mean length and mean search-triggered steps per (task, config).

    A ``None`` config is the greedy baseline.
    """
    if not tasks:
        raise ValueError("no tasks")
    rows = []
    for (env, policy), f in zip(tasks, scorers):
        for cfg in configs:
            if cfg is None:
                eps = [run_greedy_episode(env, policy, c, 0, i) for i in range(n_episodes)]
                M, tau, thr = 0, float("nan"), float("nan")
            else:
                eps = [run_guided_episode(env, policy, f, cfg, c, i) for i in range(n_episodes)]
                M, tau, thr = cfg.samples, cfg.tau, cfg.threshold
            rows.append({
                "task": env.name, "M": M, "tau": tau, "threshold": thr,
                "success_rate": float(np.mean([e.success for e in eps])),
                "mean_len": float(np.mean([e.length for e in eps])),
                "search_steps": float(np.mean([e.search_steps for e in eps])),
            })
    return rows


def search_rows_to_csv(rows: Sequence[Mapping], meta: Mapping[str, str] | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEARCH_COLUMNS)
    for r in rows:
        w.writerow([r[k] if isinstance(r[k], (str, int)) else f"{r[k]:.10g}" for k in SEARCH_COLUMNS])
    return buf.getvalue()
