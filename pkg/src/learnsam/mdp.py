"""Markov decision process primitives and the two built-in environments.

Both environments are goal-sparse: a transition pays +1 when it lands on the
goal and 0 otherwise, and the episode ends at the goal or at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ._validation import (
    InvalidActionError,
    check_continuous_actions,
    check_discrete_actions,
    check_random_state,
    check_states,
)

__all__ = [
    "EnvironmentSpec",
    "Transition",
    "Trajectory",
    "GridWorld",
    "PointMass",
    "make_env",
    "reset",
    "step",
    "rollout",
    "collect",
    "discounted_return",
    "aggregated_reward",
]


@dataclass(frozen=True)
class EnvironmentSpec:
    state_dim: int
    action_kind: str
    action_dim_or_count: int
    horizon: int
    gamma: float
    state_low: tuple
    state_high: tuple
    action_low: tuple | None = None
    action_high: tuple | None = None
    reward_type: str = "goal_sparse"

    def __post_init__(self):
        if self.action_kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown action kind {self.action_kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.action_kind == "discrete"

    def normalize(self, states: np.ndarray) -> np.ndarray:
        """Affine map of the state box onto [-1, 1] per coordinate."""
        lo = np.asarray(self.state_low, dtype=np.float64)
        hi = np.asarray(self.state_high, dtype=np.float64)
        return 2.0 * (states - lo) / (hi - lo) - 1.0


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Trajectory:
    """One episode stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    goals: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.goals is None:
            self.goals = self.rewards > 0

    @property
    def total_steps(self) -> int:
        return len(self.rewards)

    def __len__(self) -> int:
        return self.total_steps

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(
                self.states[t],
                self.actions[t],
                float(self.rewards[t]),
                self.next_states[t],
                bool(self.dones[t]),
            )
            for t in range(self.total_steps)
        ]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], state_dim: int = None):
        if not transitions:
            d = state_dim or 0
            return cls(
                np.zeros((0, d)), np.zeros(0), np.zeros(0), np.zeros((0, d)), np.zeros(0, bool)
            )
        return cls(
            np.array([t.state for t in transitions], dtype=np.float64),
            np.array([t.action for t in transitions]),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.array([t.next_state for t in transitions], dtype=np.float64),
            np.array([t.done for t in transitions], dtype=bool),
        )


class SamplingPolicy(Protocol):
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def act(self, states: np.ndarray) -> np.ndarray: ...


class _Environment:
    spec: EnvironmentSpec
    env_id: str

    def __init__(self):
        self._t = 0

    # vectorised pieces every environment provides
    def initial_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def model(self, states: np.ndarray, actions: np.ndarray):
        """Deterministic one-step dynamics: returns (next_states, rewards, goal_reached)."""
        raise NotImplementedError

    def validate_actions(self, actions):
        raise NotImplementedError

    def reset(self, rng=None) -> np.ndarray:
        rng = check_random_state(rng)
        self._t = 0
        return self.initial_states(rng, 1)[0]

    def step(self, s, a) -> Transition:
        s = check_states(s, self.spec.state_dim)
        a = self.validate_actions(a)
        s2, r, goal = self.model(s, a)
        self._t += 1
        done = bool(goal[0]) or self._t >= self.spec.horizon
        action = int(a[0]) if self.spec.discrete else a[0].copy()
        return Transition(s[0].copy(), action, float(r[0]), s2[0], done)

    def clip_actions(self, actions: np.ndarray) -> np.ndarray:
        if self.spec.discrete:
            return actions
        return np.clip(actions, self.spec.action_low, self.spec.action_high)

    def random_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.spec.discrete:
            return rng.integers(0, self.spec.action_dim_or_count, size=n)
        return rng.uniform(self.spec.action_low, self.spec.action_high, size=(n, len(self.spec.action_low)))


class GridWorld(_Environment):
    """N x N grid, start (0, 0), goal (N-1, N-1), four moves.

    Actions: 0 = +x (right), 1 = +y (up), 2 = -x (left), 3 = -y (down).
    Moves into a wall or off the grid leave the agent in place.
    """

    MOVES = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=np.float64)

    def __init__(self, size: int = 8, walls=(), horizon: int | None = None, gamma: float = 0.99):
        super().__init__()
        if size < 2:
            raise ValueError("grid size must be >= 2")
        self.size = int(size)
        self.walls = frozenset(tuple(int(c) for c in w) for w in walls)
        self.goal = np.array([size - 1, size - 1], dtype=np.float64)
        if (size - 1, size - 1) in self.walls or (0, 0) in self.walls:
            raise ValueError("start and goal cells must be free")
        self._wall_mask = np.zeros((size, size), dtype=bool)
        for x, y in self.walls:
            self._wall_mask[x, y] = True
        self.spec = EnvironmentSpec(
            state_dim=2,
            action_kind="discrete",
            action_dim_or_count=4,
            horizon=int(horizon) if horizon else 4 * self.size,
            gamma=gamma,
            state_low=(0.0, 0.0),
            state_high=(float(size - 1), float(size - 1)),
        )
        self.env_id = f"gridworld-{self.size}"

    def initial_states(self, rng, n):
        return np.zeros((n, 2))

    def validate_actions(self, actions):
        return check_discrete_actions(actions, 4)

    def model(self, states, actions):
        actions = np.asarray(actions, dtype=np.int64)
        cand = states + self.MOVES[actions]
        inside = np.all((cand >= 0) & (cand <= self.size - 1), axis=1)
        idx = np.clip(cand, 0, self.size - 1).astype(np.int64)
        blocked = self._wall_mask[idx[:, 0], idx[:, 1]]
        nxt = np.where((inside & ~blocked)[:, None], cand, states)
        goal = np.all(nxt == self.goal, axis=1)
        return nxt, goal.astype(np.float64), goal

    def is_goal(self, states):
        return np.all(np.asarray(states) == self.goal, axis=-1)


class PointMass(_Environment):
    """First-order point mass in [-1, 1]^2.

    The action lives in [-1, 1]^2 and is scaled by ``step_size`` before being
    added to the position, so each step moves at most ``step_size`` per axis.
    """

    def __init__(
        self,
        step_size: float = 0.2,
        goal=(0.8, 0.8),
        goal_radius: float = 0.1,
        start_half_width: float = 0.1,
        horizon: int = 100,
        gamma: float = 0.99,
    ):
        super().__init__()
        self.step_size = float(step_size)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.start_half_width = float(start_half_width)
        self.spec = EnvironmentSpec(
            state_dim=2,
            action_kind="continuous",
            action_dim_or_count=2,
            horizon=int(horizon),
            gamma=gamma,
            state_low=(-1.0, -1.0),
            state_high=(1.0, 1.0),
            action_low=(-1.0, -1.0),
            action_high=(1.0, 1.0),
        )
        self.env_id = "pointmass-2d"

    def initial_states(self, rng, n):
        w = self.start_half_width
        return rng.uniform(-w, w, size=(n, 2))

    def validate_actions(self, actions):
        return check_continuous_actions(actions, self.spec.action_low, self.spec.action_high)

    def model(self, states, actions):
        nxt = np.clip(states + self.step_size * np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        goal = self.is_goal(nxt)
        return nxt, goal.astype(np.float64), goal

    def is_goal(self, states):
        return np.linalg.norm(np.asarray(states) - self.goal, axis=-1) <= self.goal_radius


def make_env(kind: str = "gridworld", **params):
    if kind == "gridworld":
        return GridWorld(**params)
    if kind == "pointmass":
        return PointMass(**params)
    raise ValueError(f"unknown environment kind {kind!r}")


def reset(env, rng=None) -> np.ndarray:
    return env.reset(rng)


def step(env, s, a) -> Transition:
    return env.step(s, a)


def rollout(env, policy: SamplingPolicy, rng=None, deterministic: bool = False) -> Trajectory:
    """Run one episode through the scalar reset/step interface."""
    rng = check_random_state(rng)
    s = env.reset(rng)
    out = []
    while True:
        if deterministic:
            a = policy.act(s[None])[0]
        else:
            a = policy.sample(s[None], rng)[0]
        a = env.clip_actions(np.asarray(a)[None])[0]
        tr = env.step(s, a)
        out.append(tr)
        if tr.done:
            break
        s = tr.next_state
    return Trajectory.from_transitions(out)


def collect(
    env,
    policy: SamplingPolicy,
    n_steps: int,
    rng=None,
    *,
    n_episodes: int | None = None,
    deterministic: bool = False,
) -> list[Trajectory]:
    """Collect whole episodes, running copies of ``env`` in lockstep.

    Stops after the first round in which the step total reaches ``n_steps``
    (or after exactly ``n_episodes`` episodes when that is given).
    """
    rng = check_random_state(rng)
    spec = env.spec
    trajs: list[Trajectory] = []
    total = 0
    while True:
        if n_episodes is not None:
            n_par = n_episodes - len(trajs)
            if n_par <= 0:
                break
        else:
            if total >= n_steps:
                break
            n_par = max(1, int(np.ceil((n_steps - total) / spec.horizon)))
        states = env.initial_states(rng, n_par)
        active = np.ones(n_par, dtype=bool)
        buf_s, buf_a, buf_r, buf_s2, buf_g = [], [], [], [], []
        for _ in range(spec.horizon):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            s = states[idx]
            a = policy.act(s) if deterministic else policy.sample(s, rng)
            a = env.clip_actions(np.asarray(a))
            s2, r, g = env.model(s, a)
            buf_s.append((idx, s, a, r, s2, g))
            states[idx] = s2
            active[idx[g]] = False
        # regroup the lockstep buffers into per-episode trajectories
        per_ep = [[] for _ in range(n_par)]
        for idx, s, a, r, s2, g in buf_s:
            for k, e in enumerate(idx):
                per_ep[e].append((s[k], a[k], r[k], s2[k], g[k]))
        for rows in per_ep:
            S = np.array([x[0] for x in rows])
            A = np.array([x[1] for x in rows])
            R = np.array([x[2] for x in rows], dtype=np.float64)
            S2 = np.array([x[3] for x in rows])
            G = np.array([x[4] for x in rows], dtype=bool)
            D = G.copy()
            D[-1] = True
            trajs.append(Trajectory(S, A, R, S2, D, G))
            total += len(rows)
    return trajs


def discounted_return(traj, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    r = _rewards(traj)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def aggregated_reward(traj) -> float:
    return float(np.sum(_rewards(traj)))


def _rewards(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.rewards
    return np.asarray(traj, dtype=np.float64)
