"""Tabular POMDPs, stochastic policies, rollout simulation and exact oracles.

Histories are flat tuples ``(x1, a1, r1, x2, a2, r2, ..., xt)`` of observation
indices, action indices and rewards.  The empty tuple is the history before
the first observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .rollout import Dataset, Rollout, StepRecord

_DIST_TOL = 1e-12
DEFAULT_BUDGET = 10**6


class OracleBudgetError(RuntimeError):
    """Exact enumeration would exceed the configured history budget."""

    def __init__(self, required: int, budget: int):
        super().__init__(f"exact oracle needs more than {budget} history nodes (reached {required})")
        self.required = required
        self.budget = budget


def _check_dist(arr: np.ndarray, name: str) -> None:
    if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, rtol=0, atol=_DIST_TOL):
        raise ValueError(f"{name}: rows must be probability distributions")


@dataclass(frozen=True, eq=False)
class TabularPOMDP:
    """Finite POMDP with deterministic rewards R(s, a) and a terminal reward per state.

    An episode takes ``horizon`` actions; after the last action the process
    lands in a final state whose ``terminal_reward`` is collected.
    """

    transition: np.ndarray  # [S, A, S]
    observation: np.ndarray  # [S, X]
    reward: np.ndarray  # [S, A]
    terminal_reward: np.ndarray  # [S]
    horizon: int
    initial_state_dist: np.ndarray  # [S]
    name: str = "env"

    def __post_init__(self):
        for attr in ("transition", "observation", "reward", "terminal_reward", "initial_state_dist"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        S, A, S2 = self.transition.shape
        if S2 != S or self.observation.shape[0] != S or self.reward.shape != (S, A):
            raise ValueError("inconsistent POMDP array shapes")
        if self.terminal_reward.shape != (S,) or self.initial_state_dist.shape != (S,):
            raise ValueError("inconsistent POMDP array shapes")
        _check_dist(self.transition, "transition")
        _check_dist(self.observation, "observation")
        _check_dist(self.initial_state_dist, "initial_state_dist")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (np.all(np.isfinite(self.reward)) and np.all(np.isfinite(self.terminal_reward))):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_obs(self) -> int:
        return self.observation.shape[1]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Policy conditioned on the last ``memory`` observations.

    ``table`` maps a tuple of observation indices (the trailing window of the
    observation history, shorter at episode start) to a distribution over
    actions; unseen keys fall back to ``fallback``.
    """

    table: Mapping[tuple[int, ...], np.ndarray]
    fallback: np.ndarray
    memory: int = 1

    def __post_init__(self):
        table = {}
        for key, dist in dict(self.table).items():
            dist = np.array(dist, dtype=float)
            _check_dist(dist, f"policy[{key}]")
            dist.setflags(write=False)
            table[tuple(int(k) for k in key)] = dist
        fallback = np.array(self.fallback, dtype=float)
        _check_dist(fallback, "policy fallback")
        fallback.setflags(write=False)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "fallback", fallback)
        if self.memory < 1:
            raise ValueError("memory must be >= 1")

    @property
    def n_actions(self) -> int:
        return self.fallback.shape[0]

    def context(self, observations: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(x) for x in observations[-self.memory:])

    def probs(self, observations: Sequence[int]) -> np.ndarray:
        return self.table.get(self.context(observations), self.fallback)

    def greedy(self, observations: Sequence[int]) -> int:
        return int(np.argmax(self.probs(observations)))


def entropy(dist: np.ndarray) -> float:
    p = dist[dist > 0]
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------- histories


def history_observations(history: Sequence) -> list[int]:
    return [int(x) for x in history[0::3]]


def history_actions(history: Sequence) -> list[int]:
    return [int(a) for a in history[1::3]]


def history_rewards(history: Sequence) -> list[float]:
    return [float(r) for r in history[2::3]]


def extend_history(history: tuple, action: int, reward: float, obs: int) -> tuple:
    return tuple(history) + (int(action), float(reward), int(obs))


# --------------------------------------------------------------------------- builders


def build_example1() -> tuple[TabularPOMDP, TabularPolicy]:
    """Two-step MDP where the second action is irrelevant to success.

    States 0 (s0), 1 (s1) and 2 (the absorbing end state); actions 0 (a) and
    1 (a').  Only a' at s0 pays reward 1.
    """
    transition = np.zeros((3, 2, 3))
    transition[0, :, 1] = 1.0
    transition[1, :, 2] = 1.0
    transition[2, :, 2] = 1.0
    reward = np.zeros((3, 2))
    reward[0, 1] = 1.0
    env = TabularPOMDP(
        transition=transition,
        observation=np.eye(3),
        reward=reward,
        terminal_reward=np.zeros(3),
        horizon=2,
        initial_state_dist=np.array([1.0, 0.0, 0.0]),
        name="example1",
    )
    policy = TabularPolicy(
        table={(0,): np.array([0.0, 1.0]), (1,): np.array([0.5, 0.5])},
        fallback=np.array([0.5, 0.5]),
    )
    return env, policy


_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))  # right, left, down, up
_PERPENDICULAR = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}


@dataclass(frozen=True)
class GridConfig:
    """Goal-reaching gridworld family.

    Observations are the agent's offset from the goal.  With ``aliasing``
    the horizontal offset is bucketed in pairs of columns, so neighbouring
    columns become indistinguishable.  ``policy_noise`` is the fraction of
    observations whose greedy action is replaced by a wrong one.
    """

    width: int = 5
    height: int = 5
    n_tasks: int = 1
    slip_prob: float = 0.2
    horizon: int = 8
    seed: int = 0
    epsilon: float = 0.2
    policy_noise: float = 0.0
    aliasing: bool = False
    min_distance: int = 4
    max_distance: int = 5

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("grid dimensions must be >= 2")
        if not 0.0 <= self.slip_prob <= 0.5:
            raise ValueError("slip_prob must lie in [0, 0.5]")
        if not 0.0 <= self.epsilon <= 1.0 or not 0.0 <= self.policy_noise <= 1.0:
            raise ValueError("epsilon and policy_noise must lie in [0, 1]")
        if self.n_tasks < 1 or self.horizon < 1:
            raise ValueError("n_tasks and horizon must be >= 1")
        if self.min_distance > min(self.max_distance, self.width + self.height - 2):
            raise ValueError("min_distance exceeds max_distance or the grid diameter")


def _grid_obs_index(cfg: GridConfig):
    """Map (dx, dy) offsets to observation indices; the last index is 'done'."""
    span_y = 2 * cfg.height - 1
    if cfg.aliasing:
        dx_bins = sorted({dx // 2 for dx in range(-(cfg.width - 1), cfg.width)})
    else:
        dx_bins = list(range(-(cfg.width - 1), cfg.width))
    bin_pos = {b: i for i, b in enumerate(dx_bins)}

    def index(dx: int, dy: int) -> int:
        b = dx // 2 if cfg.aliasing else dx
        return bin_pos[b] * span_y + (dy + cfg.height - 1)

    return index, len(dx_bins) * span_y + 1


def grid_observation_count(cfg: GridConfig) -> int:
    return _grid_obs_index(cfg)[1]


def build_gridworld(cfg: GridConfig) -> list[tuple[TabularPOMDP, TabularPolicy]]:
    """One seeded (environment, policy) pair per task."""
    rng = np.random.default_rng(cfg.seed)
    W, H = cfg.width, cfg.height
    n_cells = W * H
    S = n_cells + 1  # + absorbing 'done' state
    obs_index, n_obs = _grid_obs_index(cfg)
    done_obs = n_obs - 1

    cells = [(x, y) for y in range(H) for x in range(W)]
    tasks = []
    for k in range(cfg.n_tasks):
        while True:
            start, goal = rng.choice(n_cells, size=2, replace=False)
            (sx, sy), (gx, gy) = cells[start], cells[goal]
            if cfg.min_distance <= abs(sx - gx) + abs(sy - gy) <= cfg.max_distance:
                break

        transition = np.zeros((S, 4, S))
        reward = np.zeros((S, 4))
        observation = np.zeros((S, n_obs))
        for s, (x, y) in enumerate(cells):
            observation[s, obs_index(x - gx, y - gy)] = 1.0
            if s == goal:
                transition[s, :, n_cells] = 1.0
                reward[s, :] = 1.0
                continue
            for a in range(4):
                outcomes = [(a, 1.0 - cfg.slip_prob)]
                outcomes += [(p, cfg.slip_prob / 2) for p in _PERPENDICULAR[a]]
                for move, prob in outcomes:
                    nx, ny = x + _MOVES[move][0], y + _MOVES[move][1]
                    if not (0 <= nx < W and 0 <= ny < H):
                        nx, ny = x, y
                    transition[s, a, ny * W + nx] += prob
        transition[n_cells, :, n_cells] = 1.0
        observation[n_cells, done_obs] = 1.0
        terminal = np.zeros(S)
        terminal[goal] = 1.0
        init = np.zeros(S)
        init[start] = 1.0
        env = TabularPOMDP(transition, observation, reward, terminal, cfg.horizon, init, name=f"grid{k}")

        # greedy action per observation: the action that is distance-reducing for most member cells
        members: dict[int, list[tuple[int, int]]] = {}
        for x, y in cells:
            members.setdefault(obs_index(x - gx, y - gy), []).append((x, y))
        table = {}
        for obs in sorted(members):
            votes = np.zeros(4)
            for x, y in members[obs]:
                for a, (mx, my) in enumerate(_MOVES):
                    if abs(x + mx - gx) + abs(y + my - gy) < abs(x - gx) + abs(y - gy):
                        votes[a] += 1
            greedy = int(np.argmax(votes))
            if votes.max() > 0 and rng.random() < cfg.policy_noise:
                greedy = int(rng.choice([a for a in range(4) if a != greedy]))
            dist = np.full(4, cfg.epsilon / 4)
            dist[greedy] += 1.0 - cfg.epsilon
            table[(obs,)] = dist
        table[(done_obs,)] = np.full(4, 0.25)
        policy = TabularPolicy(table=table, fallback=np.full(4, 0.25))
        tasks.append((env, policy))
    return tasks


# --------------------------------------------------------------------------- simulation


def _sample(dist: np.ndarray, rng: np.random.Generator) -> int:
    return int(rng.choice(dist.shape[0], p=dist))


def one_step_lookahead(env: TabularPOMDP, state: int, action: int, seed=None) -> tuple[int, int, float]:
    """Sample (next_state, next_observation, reward) for one transition."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not (0 <= state < env.n_states and 0 <= action < env.n_actions):
        raise ValueError("invalid state or action")
    next_state = _sample(env.transition[state, action], rng)
    next_obs = _sample(env.observation[next_state], rng)
    return next_state, next_obs, float(env.reward[state, action])


@dataclass
class Episode:
    """Raw trajectory of one simulated episode."""

    states: list[int] = field(default_factory=list)
    observations: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    action_dists: list[np.ndarray] = field(default_factory=list)
    terminal_reward: float = 0.0

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards) + self.terminal_reward)

    def history(self, t: int) -> tuple:
        """History key up to and including the observation of step ``t`` (1-based)."""
        out: list = []
        for i in range(t):
            out.append(self.observations[i])
            if i < t - 1:
                out += [self.actions[i], self.rewards[i]]
        return tuple(out)


def run_episode(env: TabularPOMDP, policy: TabularPolicy, rng: np.random.Generator) -> Episode:
    ep = Episode()
    state = _sample(env.initial_state_dist, rng)
    obs = _sample(env.observation[state], rng)
    for _ in range(env.horizon):
        ep.states.append(state)
        ep.observations.append(obs)
        dist = policy.probs(ep.observations)
        action = _sample(dist, rng)
        ep.action_dists.append(dist)
        ep.actions.append(action)
        state, obs, r = one_step_lookahead(env, state, action, rng)
        ep.rewards.append(r)
    ep.terminal_reward = float(env.terminal_reward[state])
    return ep


def make_step(env: TabularPOMDP, obs: int, action: int, dist: np.ndarray, reward: float) -> StepRecord:
    """Step record for observation ``obs`` and executed ``action`` drawn from ``dist``.

    Features are the one-hot observation followed by the one-hot executed
    action, so a predictor at step t sees the same (h_t, a_t) as the oracle
    Q-values.
    """
    onehot = np.zeros(env.n_obs + env.n_actions)
    onehot[obs] = 1.0
    onehot[env.n_obs + action] = 1.0
    return StepRecord(
        features=onehot,
        reward=float(reward),
        chosen_probs=(float(dist[action]),),
        entropies=(entropy(dist),),
        top_k_probs=(tuple(sorted((float(p) for p in dist), reverse=True)),),
    )


def episode_to_rollout(env: TabularPOMDP, ep: Episode, c: float, task_id: str) -> Rollout:
    """Convert a raw episode into a labelled rollout.

    The terminal reward is folded into the last step's reward so that the
    summed step rewards equal the episode return.
    """
    T = len(ep.actions)
    steps = [
        make_step(env, ep.observations[t], ep.actions[t], ep.action_dists[t],
                  ep.rewards[t] + (ep.terminal_reward if t == T - 1 else 0.0))
        for t in range(T)
    ]
    label = int(ep.total_return >= c)
    meta = {
        "threshold": repr(float(c)),
        "env": env.name,
        "observations": ",".join(map(str, ep.observations)),
        "actions": ",".join(map(str, ep.actions)),
    }
    return Rollout(task_id=task_id, steps=tuple(steps), label=label, meta=meta)


def simulate(
    env: TabularPOMDP,
    policy: TabularPolicy,
    n: int,
    c: float,
    seed: int,
    task_id: str | None = None,
) -> Dataset:
    """Sample ``n`` labelled rollouts; rollout ``i`` uses its own stream seeded by (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    task_id = env.name if task_id is None else task_id
    rollouts = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        rollouts.append(episode_to_rollout(env, run_episode(env, policy, rng), c, task_id))
    return Dataset(tuple(rollouts))


def rollout_history(rollout: Rollout, t: int) -> tuple[tuple, int]:
    """Rebuild (history key up to x_t, executed action a_t) from a simulated rollout's metadata."""
    obs = [int(v) for v in rollout.meta["observations"].split(",")]
    acts = [int(v) for v in rollout.meta["actions"].split(",")]
    out: list = []
    for i in range(t):
        out.append(obs[i])
        if i < t - 1:
            out += [acts[i], rollout.steps[i].reward]
    return tuple(out), acts[t - 1]


# --------------------------------------------------------------------------- exact oracle


class OracleTables:
    """Exact Q-values, values and success posteriors of a policy in a tabular POMDP.

    Values are computed by backward induction over observation/action/reward
    histories.  Results are memoised on the sufficient statistic of a history
    (step, belief over states, accumulated reward, policy context), so every
    exact history can be queried while the work stays proportional to the
    number of distinct statistics.  ``budget`` caps that number.
    """

    def __init__(self, env: TabularPOMDP, policy: TabularPolicy, c: float, budget: int = DEFAULT_BUDGET):
        if policy.n_actions != env.n_actions:
            raise ValueError("policy and environment disagree on the action count")
        self.env = env
        self.policy = policy
        self.c = float(c)
        self.budget = budget
        self._nodes: dict = {}
        # initial observation distribution
        self._x1 = env.initial_state_dist @ env.observation

    # -- belief filtering
    def belief(self, history: Sequence) -> np.ndarray:
        env = self.env
        history = tuple(history)
        if not history:
            raise ValueError("the empty history has no belief")
        obs = history_observations(history)
        acts = history_actions(history)
        rews = history_rewards(history)
        b = env.initial_state_dist * env.observation[:, obs[0]]
        b = self._normalise(b, history)
        for a, r, x in zip(acts, rews, obs[1:]):
            mask = np.isclose(env.reward[:, a], r, rtol=0, atol=1e-12)
            b = (b * mask) @ env.transition[:, a, :] * env.observation[:, x]
            b = self._normalise(b, history)
        return b

    @staticmethod
    def _normalise(b: np.ndarray, history) -> np.ndarray:
        total = b.sum()
        if total <= 0:
            raise ValueError(f"history {history!r} has zero probability under the environment")
        return b / total

    # -- public queries
    def success_posterior(self, history: Sequence = ()) -> float:
        """E[Y | h]; the empty history gives the overall success probability."""
        history = tuple(history)
        if not history:
            return float(sum(p * self.success_posterior((x,)) for x, p in enumerate(self._x1) if p > 0))
        return self._node_for(history)["sp"]

    def value(self, history: Sequence) -> float:
        """Expected return still to come from step t on (current reward included)."""
        return self._node_for(tuple(history))["v"]

    def q(self, history: Sequence, action: int) -> float:
        return float(self._node_for(tuple(history))["q"][action])

    def success_q(self, history: Sequence, action: int) -> float:
        """E[Y | h, a]."""
        return float(self._node_for(tuple(history))["yq"][action])

    def accumulated_reward(self, history: Sequence) -> float:
        return float(sum(history_rewards(history)))

    def branches(self, history: Sequence, action: int) -> list[tuple[float, float, int]]:
        """Outcome distribution [(prob, reward, next_obs)] of taking ``action`` after ``history``."""
        history = tuple(history)
        if len(history_actions(history)) >= self.env.horizon - 1:
            return []
        return [(p, r, x) for p, r, x, _ in self._branch(self.belief(history), action)]

    def node_count(self) -> int:
        return len(self._nodes)

    def histories(self, on_policy: bool = True):
        """Yield every reachable history (positive probability), shortest first per branch."""
        stack = [((x,), p) for x, p in enumerate(self._x1) if p > 0][::-1]
        count = 0
        while stack:
            h, p = stack.pop()
            count += 1
            if count > self.budget:
                raise OracleBudgetError(count, self.budget)
            yield h
            dist = self.policy.probs(history_observations(h))
            children = []
            for a in range(self.env.n_actions):
                if on_policy and dist[a] <= 0:
                    continue
                for pb, r, x in self.branches(h, a):
                    children.append((extend_history(h, a, r, x), p * pb))
            stack.extend(children[::-1])

    # -- backward induction
    def _branch(self, b: np.ndarray, a: int):
        env = self.env
        out = []
        rewards = env.reward[:, a]
        for r in np.unique(rewards[b > 0]):
            mask = np.isclose(rewards, r, rtol=0, atol=1e-12)
            joint = ((b * mask) @ env.transition[:, a, :])[:, None] * env.observation
            mass = joint.sum(axis=0)
            for x in np.flatnonzero(mass > 0):
                out.append((float(mass[x]), float(r), int(x), joint[:, x] / mass[x]))
        return out

    def _node_for(self, history: tuple) -> dict:
        obs = history_observations(history)
        t = len(obs) - 1
        if t >= self.env.horizon:
            raise ValueError("history is longer than the horizon")
        return self._node(t, self.belief(history), self.accumulated_reward(history), self.policy.context(obs))

    def _node(self, t: int, b: np.ndarray, acc: float, ctx: tuple) -> dict:
        key = (t, b.tobytes(), acc, ctx)
        node = self._nodes.get(key)
        if node is not None:
            return node
        if len(self._nodes) >= self.budget:
            raise OracleBudgetError(len(self._nodes) + 1, self.budget)
        env = self.env
        A = env.n_actions
        q = np.zeros(A)
        yq = np.zeros(A)
        last = t == env.horizon - 1
        for a in range(A):
            if last:
                # final action: immediate reward then terminal reward of the landing state
                for s in np.flatnonzero(b > 0):
                    r = env.reward[s, a]
                    nxt = env.transition[s, a]
                    q[a] += b[s] * (r + nxt @ env.terminal_reward)
                    yq[a] += b[s] * nxt[(acc + r + env.terminal_reward) >= self.c].sum()
                continue
            for p, r, x, nb in self._branch(b, a):
                child = self._node(t + 1, nb, acc + r, self.policy.context(list(ctx) + [x]))
                q[a] += p * (r + child["v"])
                yq[a] += p * child["sp"]
        dist = self.policy.table.get(ctx, self.policy.fallback)
        node = {"q": q, "yq": np.clip(yq, 0.0, 1.0), "v": float(dist @ q), "sp": float(np.clip(dist @ yq, 0.0, 1.0))}
        self._nodes[key] = node
        return node


def exact_q(env: TabularPOMDP, policy: TabularPolicy, c: float, budget: int = DEFAULT_BUDGET) -> OracleTables:
    """Exact oracle tables; the root is expanded eagerly so budget errors surface here."""
    tables = OracleTables(env, policy, c, budget)
    tables.success_posterior(())
    return tables


def oracle_success_scores(tables: OracleTables, rollout: Rollout) -> np.ndarray:
    """Per-step E[Y | h_t, a_t] for a simulated rollout."""
    out = np.empty(rollout.horizon)
    for t in range(1, rollout.horizon + 1):
        h, a = rollout_history(rollout, t)
        out[t - 1] = tables.success_q(h, a)
    return out
