"""Reference experts, noisy demonstration sampling and the demonstration CSV format."""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import check_random_state, check_states
from .mdp import GridWorld, aggregated_reward, collect
from .policy import EnsemblePolicy

logger = logging.getLogger(__name__)


@dataclass
class DemonstrationSet:
    """Ordered state-action pairs with the provenance of the generating run."""

    states: np.ndarray
    actions: np.ndarray
    source_quality: float = float("nan")
    noise_sd: float = 0.0
    env_id: str = ""
    action_kind: str = "discrete"

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        self.states = s if s.ndim == 2 else s.reshape(len(s), -1)
        if self.action_kind == "discrete":
            self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        else:
            self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.states), -1)
        if len(self.actions) != len(self.states):
            raise ValueError("states and actions differ in length")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def pairs(self) -> list[tuple]:
        return list(zip(self.states, self.actions))


# ---------------------------------------------------------------------------
# reference experts


class GridShortestPathExpert:
    """Deterministic shortest-path policy on a grid; ties go to the lowest action index."""

    def __init__(self, env: GridWorld):
        self.env = env
        n = env.size
        dist = np.full((n, n), np.inf)
        gx, gy = n - 1, n - 1
        dist[gx, gy] = 0
        queue = deque([(gx, gy)])
        while queue:
            x, y = queue.popleft()
            for dx, dy in env.MOVES.astype(int):
                px, py = x - dx, y - dy
                if 0 <= px < n and 0 <= py < n and (px, py) not in env.walls and dist[px, py] == np.inf:
                    dist[px, py] = dist[x, y] + 1
                    queue.append((px, py))
        self.dist = dist

    def act(self, states) -> np.ndarray:
        states = check_states(states, 2)
        B = states.shape[0]
        nA = len(self.env.MOVES)
        S = np.repeat(states, nA, axis=0)
        A = np.tile(np.arange(nA), B)
        nxt, _, _ = self.env.model(S, A)
        d = self.dist[nxt[:, 0].astype(int), nxt[:, 1].astype(int)].reshape(B, nA)
        return np.argmin(d, axis=1)

    def sample(self, states, rng=None) -> np.ndarray:
        return self.act(states)

    def predict_proba(self, states) -> np.ndarray:
        a = self.act(states)
        out = np.zeros((a.size, len(self.env.MOVES)))
        out[np.arange(a.size), a] = 1.0
        return out


@dataclass
class ReferenceExpert:
    policy: object
    eval_return: float
    success_rate: float
    kind: str = "analytic"
    budget_exhausted: bool = False
    meta: dict = field(default_factory=dict)

    def act(self, states) -> np.ndarray:
        return self.policy.act(states)

    def to_dict(self) -> dict:
        d = {
            "version": 1,
            "kind": self.kind,
            "eval_return": self.eval_return,
            "success_rate": self.success_rate,
            "budget_exhausted": self.budget_exhausted,
            "meta": self.meta,
        }
        if self.kind == "trained":
            d["policy"] = self.policy.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, env) -> "ReferenceExpert":
        if d.get("version") != 1:
            raise ValueError("unsupported reference expert file")
        if d["kind"] == "analytic":
            policy = GridShortestPathExpert(env)
        else:
            policy = EnsemblePolicy.from_dict(d["policy"], env.spec)
        return cls(policy, d["eval_return"], d["success_rate"], d["kind"], d["budget_exhausted"], d.get("meta", {}))


def save_reference_expert(expert: ReferenceExpert, path) -> None:
    Path(path).write_text(json.dumps(expert.to_dict()))


def load_reference_expert(path, env) -> ReferenceExpert:
    return ReferenceExpert.from_dict(json.loads(Path(path).read_text()), env)


@dataclass
class ReferenceExpertConfig:
    analytic: bool = True
    n_epochs: int = 60
    steps_per_epoch: int | None = None
    hidden: tuple = (32, 32)
    eval_episodes: int = 100
    target_success: float = 0.9
    seed: int = 0


def _evaluate(env, policy, n, rng):
    trajs = collect(env, policy, 0, rng, n_episodes=n, deterministic=True)
    rewards = np.array([aggregated_reward(t) for t in trajs])
    return float(rewards.mean()), float(np.mean(rewards > 0))


def train_reference_expert(env, cfg: ReferenceExpertConfig | None = None) -> ReferenceExpert:
    """Near-optimal expert for ``env``.

    Gridworlds can use the analytic shortest-path policy; otherwise a plain
    policy is trained with the trust-region learner and the best
    evaluation is kept. ``budget_exhausted`` is set when the target success
    rate was never reached.
    """
    from .learner import LearnSAM

    cfg = cfg or ReferenceExpertConfig()
    eval_rng = np.random.default_rng([cfg.seed, 1])
    if cfg.analytic and isinstance(env, GridWorld):
        pol = GridShortestPathExpert(env)
        ret, succ = _evaluate(env, pol, 1, eval_rng)
        return ReferenceExpert(pol, ret, succ, "analytic")
    spe = cfg.steps_per_epoch or (2048 if env.spec.discrete else 4096)
    est = LearnSAM(env, method="trpo", hidden=cfg.hidden, n_epochs=cfg.n_epochs, steps_per_epoch=spe,
                   random_state=cfg.seed).fit()
    ret, succ = _evaluate(env, est.ensemble_, cfg.eval_episodes, eval_rng)
    exhausted = succ < cfg.target_success
    if exhausted:
        logger.warning("reference expert reached success rate %.2f below target %.2f", succ, cfg.target_success)
    return ReferenceExpert(est.ensemble_, ret, succ, "trained", exhausted, {"epochs": cfg.n_epochs})


# ---------------------------------------------------------------------------
# demonstrations


class NoisyPolicy:
    """Expert's greedy action perturbed by noise.

    Discrete: replaced by a uniform random action with probability
    min(noise_sd, 1). Continuous: additive N(0, noise_sd^2) per dimension.
    """

    def __init__(self, expert, env, noise_sd: float):
        if noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        self.expert = expert
        self.env = env
        self.noise_sd = float(noise_sd)

    def act(self, states):
        return self.expert.act(states)

    def sample(self, states, rng):
        a = np.asarray(self.expert.act(states))
        if self.env.spec.discrete:
            flip = rng.random(a.shape[0]) < min(self.noise_sd, 1.0)
            rand = rng.integers(0, self.env.spec.action_dim_or_count, size=a.shape[0])
            return np.where(flip, rand, a)
        return a + self.noise_sd * rng.standard_normal(a.shape)


def sample_demonstration(expert, env, noise_sd: float, n_pairs: int, rng=None) -> DemonstrationSet:
    """Concatenate noisy expert episodes and truncate to exactly ``n_pairs`` pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = check_random_state(rng)
    trajs = collect(env, NoisyPolicy(expert, env, noise_sd), n_pairs, rng)
    states = np.vstack([t.states for t in trajs])[:n_pairs]
    if env.spec.discrete:
        actions = np.concatenate([t.actions for t in trajs])[:n_pairs]
    else:
        actions = np.vstack([t.actions for t in trajs])[:n_pairs]
    quality = float(np.mean([aggregated_reward(t) for t in trajs]))
    return DemonstrationSet(states, actions, quality, float(noise_sd), env.env_id, env.spec.action_kind)


def sparsify(demo: DemonstrationSet, n: int, rng=None) -> DemonstrationSet:
    """Uniform subsample of ``n`` pairs without replacement, order preserved."""
    if not 1 <= n <= len(demo):
        raise ValueError(f"n must lie in [1, {len(demo)}]")
    rng = check_random_state(rng)
    idx = np.sort(rng.choice(len(demo), size=n, replace=False))
    return replace(demo, states=demo.states[idx], actions=demo.actions[idx])


_META = ("env_id", "noise_sd", "source_quality", "action_kind", "state_dim", "action_dim")


def save_demo_csv(demo: DemonstrationSet, path) -> None:
    """Metadata row pair, a column header, then one row per pair.

    Floats are written with ``repr`` so that reloading is exact.
    """
    da = 1 if demo.action_kind == "discrete" else demo.actions.shape[1]
    ds = demo.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_META)
        w.writerow([demo.env_id, repr(float(demo.noise_sd)), repr(float(demo.source_quality)), demo.action_kind, ds, da])
        w.writerow([f"s{i}" for i in range(ds)] + [f"a{i}" for i in range(da)])
        for s, a in zip(demo.states, demo.actions):
            acts = [str(int(a))] if demo.action_kind == "discrete" else [repr(float(x)) for x in a]
            w.writerow([repr(float(x)) for x in s] + acts)


def load_demo_csv(path) -> DemonstrationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3 or tuple(rows[0]) != _META:
        raise ValueError(f"{path} is not a demonstration file")
    meta = dict(zip(rows[0], rows[1]))
    ds, da = int(meta["state_dim"]), int(meta["action_dim"])
    body = rows[3:]
    states = np.array([[float(x) for x in r[:ds]] for r in body]).reshape(-1, ds)
    if meta["action_kind"] == "discrete":
        actions = np.array([int(r[ds]) for r in body], dtype=np.int64)
    else:
        actions = np.array([[float(x) for x in r[ds : ds + da]] for r in body]).reshape(-1, da)
    return DemonstrationSet(
        states, actions, float(meta["source_quality"]), float(meta["noise_sd"]), meta["env_id"], meta["action_kind"]
    )
