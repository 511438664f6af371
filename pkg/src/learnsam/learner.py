"""The LEARN-SAM training loop as an estimator, and its per-epoch log."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mdp import aggregated_reward, collect
from .optim import (
    NonFiniteGradientError,
    PolicyBatch,
    TrustRegionConfig,
    ValueFunction,
    estimate_advantages,
    returns_to_go,
    trust_region_step,
)
from .policy import EnsemblePolicy, ExpertTrainConfig, ZeroProbabilityError, make_ensemble, pretrain_expert
from .sam import GroupingConfig, sam_apply, score_states

logger = logging.getLogger(__name__)

METHODS = ("learn_sam", "trpo", "pretrain", "naive_ensemble")

LOG_COLUMNS = (
    "epoch",
    "env_steps",
    "iterations_10k",
    "eval_reward",
    "eval_reward_sd",
    "expert_free_weight",
    "n_expert_slots",
    "expert_weight_total",
    "kl",
    "surrogate_before",
    "surrogate_after",
    "step_fraction",
    "step_accepted",
    "sam_applied",
    "sam_deviation",
    "psi_clamped",
    "value_loss",
    "aborted",
)


class TrainingLog:
    """Append-only per-epoch records; wall-clock times are kept apart."""

    columns = LOG_COLUMNS

    def __init__(self, records=None):
        self.records: list[dict] = []
        self.wall_clock: list[float] = []
        for r in records or ():
            self.append(r)

    def append(self, record: dict, seconds: float = 0.0) -> None:
        missing = set(self.columns) - set(record)
        if missing:
            raise ValueError(f"log record lacks {sorted(missing)}")
        if self.records and record["env_steps"] <= self.records[-1]["env_steps"]:
            raise ValueError("cumulative environment steps must strictly increase")
        self.records.append({c: record[c] for c in self.columns})
        self.wall_clock.append(float(seconds))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.asarray([r[name] for r in self.records], dtype=np.float64)

    @property
    def eval_rewards(self) -> np.ndarray:
        return self.column("eval_reward")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.records:
                w.writerow([_fmt(r[c]) for c in self.columns])

    def timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "seconds"])
            for r, t in zip(self.records, self.wall_clock):
                w.writerow([r["epoch"], f"{t:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        log = cls()
        for row in rows:
            log.append({c: _parse(row[c]) for c in cls.columns})
        return log


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


class LearnSAM(BaseEstimator):
    """Reinforcement learning from demonstrations with a localised expert ensemble.

    ``method`` selects the learner: ``learn_sam`` (localised ensemble with
    split-and-merge), ``naive_ensemble`` (lambda == 1, no split-and-merge),
    ``pretrain`` (behaviour cloning of the policy, then trust-region
    training) or ``trpo`` (demonstrations ignored).

    ``fit(demos)`` runs ``n_epochs`` epochs of collection, value fitting,
    optional split-and-merge and one trust-region step. The log starts with
    an evaluation of the initial policy as epoch 0.
    """

    def __init__(
        self,
        env=None,
        method="learn_sam",
        hidden=(32, 32),
        metric="weighted_l2",
        phi="linear",
        h=1.0,
        sam=True,
        grouping="softmax",
        c=4.0,
        b=(-0.5, 0.5),
        drop_unhelpful=True,
        sam_interval=1,
        psi_samples=32,
        delta=0.01,
        cg_iters=10,
        damping=1e-2,
        backtrack=0.8,
        max_backtracks=10,
        gae_lambda=0.95,
        normalize_advantages=True,
        value_hidden=(32, 32),
        value_iters=50,
        steps_per_epoch=2048,
        n_epochs=20,
        eval_episodes=10,
        smoothing=0.1,
        degree=2,
        min_std=0.05,
        pretrain_iters=100,
        random_state=0,
    ):
        self.env = env
        self.method = method
        self.hidden = hidden
        self.metric = metric
        self.phi = phi
        self.h = h
        self.sam = sam
        self.grouping = grouping
        self.c = c
        self.b = b
        self.drop_unhelpful = drop_unhelpful
        self.sam_interval = sam_interval
        self.psi_samples = psi_samples
        self.delta = delta
        self.cg_iters = cg_iters
        self.damping = damping
        self.backtrack = backtrack
        self.max_backtracks = max_backtracks
        self.gae_lambda = gae_lambda
        self.normalize_advantages = normalize_advantages
        self.value_hidden = value_hidden
        self.value_iters = value_iters
        self.steps_per_epoch = steps_per_epoch
        self.n_epochs = n_epochs
        self.eval_episodes = eval_episodes
        self.smoothing = smoothing
        self.degree = degree
        self.min_std = min_std
        self.pretrain_iters = pretrain_iters
        self.random_state = random_state

    # -- setup --------------------------------------------------------------
    def _validate(self):
        if self.env is None:
            raise ValueError("an environment is required")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.n_epochs < 0 or self.steps_per_epoch < 1 or self.eval_episodes < 1:
            raise ValueError("budget must be positive")
        if self.sam_interval < 1:
            raise ValueError("sam_interval must be >= 1")

    def _streams(self):
        ss = np.random.SeedSequence(self.random_state)
        return [np.random.default_rng(s) for s in ss.spawn(4)]

    def _build(self, demos, init_rng):
        spec = self.env.spec
        experts = []
        if self.method in ("learn_sam", "naive_ensemble"):
            cfg = ExpertTrainConfig(self.smoothing, self.degree, self.min_std)
            experts = [pretrain_expert(d, spec, cfg) for d in demos]
        lam = {"metric": self.metric, "phi": self.phi, "h": self.h}
        ens = make_ensemble(spec, experts, lam, self.hidden, init_rng, localize=self.method == "learn_sam")
        if self.method == "pretrain" and demos:
            _behaviour_clone(ens, demos, self.pretrain_iters)
        return ens

    def _evaluate(self, ens, rng):
        trajs = collect(self.env, ens, 0, rng, n_episodes=self.eval_episodes, deterministic=True)
        rewards = np.array([aggregated_reward(t) for t in trajs])
        states = np.vstack([t.states for t in trajs])
        return rewards, states

    # -- main loop ----------------------------------------------------------
    def fit(self, demonstrations=(), y=None):
        self._validate()
        demos = list(demonstrations) if self.method != "trpo" else []
        env = self.env
        spec = env.spec
        init_rng, collect_rng, eval_rng, aux_rng = self._streams()
        ens = self._build(demos, init_rng)
        value = ValueFunction(
            self.value_hidden,
            self.value_iters,
            warm_start=True,
            state_low=spec.state_low,
            state_high=spec.state_high,
            random_state=int(init_rng.integers(2**31)),
        )
        trc = TrustRegionConfig(self.delta, self.cg_iters, self.damping, self.backtrack, self.max_backtracks)
        use_sam = self.method == "learn_sam" and self.sam
        gcfg = GroupingConfig(self.grouping, self.c, tuple(self.b)) if use_sam else None

        log = TrainingLog()
        self.sam_states_ = []
        t0 = time.perf_counter()
        rewards, eval_states = self._evaluate(ens, eval_rng)
        log.append(
            _record(0, 0, rewards, ens, eval_states, None, None, np.nan, 0, np.nan, False),
            time.perf_counter() - t0,
        )
        steps = 0
        for epoch in range(1, self.n_epochs + 1):
            t0 = time.perf_counter()
            trajs = collect(env, ens, self.steps_per_epoch, collect_rng)
            steps += sum(len(t) for t in trajs)
            states = np.vstack([t.states for t in trajs])
            actions = np.concatenate([t.actions for t in trajs]) if spec.discrete else np.vstack(
                [t.actions for t in trajs]
            )
            old_logp = ens.batch(states, actions).log_prob(ens.get_flat())
            returns = np.concatenate([returns_to_go(t.rewards, spec.gamma) for t in trajs])
            value.fit(states, returns)
            adv = estimate_advantages(trajs, value, spec.gamma, self.gae_lambda, self.normalize_advantages)

            sam_state, n_clamped = None, 0
            cand = ens
            if use_sam and ens.n_slots and epoch % self.sam_interval == 0:
                psi, vabs, n_clamped = score_states(ens, states, env, value, spec.gamma, self.psi_samples, aux_rng)
                if not np.any(returns):
                    # no reward anywhere: the exact value is 0 and so is every advantage
                    psi = np.zeros_like(psi)
                cand, sam_state = sam_apply(ens, states, psi, gcfg, self.drop_unhelpful, vabs)
                self.sam_states_.append(sam_state)

            aborted = False
            info = None
            try:
                new, info = trust_region_step(cand, PolicyBatch(states, actions, adv.advantages, old_logp), trc, aux_rng)
            except (NonFiniteGradientError, ZeroProbabilityError) as exc:
                logger.warning("epoch %d aborted: %s", epoch, exc)
                new, aborted = ens, True
            ens = new
            rewards, _ = self._evaluate(ens, eval_rng)
            applied = sam_state is not None and not sam_state.skipped and not aborted
            deviation = sam_state.deviation if applied else np.nan
            log.append(
                _record(epoch, steps, rewards, ens, states, info, applied, deviation, n_clamped, value.loss_, aborted),
                time.perf_counter() - t0,
            )
        self.ensemble_ = ens
        self.value_ = value
        self.log_ = log
        return self

    # -- inference ----------------------------------------------------------
    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.act(X)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.predict_proba(X)

    def sample(self, X, rng=None) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        return self.ensemble_.sample(X, rng)


def _record(epoch, steps, rewards, ens: EnsemblePolicy, states, info, sam_applied, deviation, n_clamped, vloss, aborted):
    free = ens.expert_free_weight(states)
    return {
        "epoch": int(epoch),
        "env_steps": int(steps),
        "iterations_10k": steps / 1e4,
        "eval_reward": float(np.mean(rewards)),
        "eval_reward_sd": float(np.std(rewards)),
        "expert_free_weight": float(np.mean(free)),
        "n_expert_slots": int(ens.n_slots),
        "expert_weight_total": float(ens.weights().sum()),
        "kl": info.kl if info else np.nan,
        "surrogate_before": info.surrogate_before if info else np.nan,
        "surrogate_after": info.surrogate_after if info else np.nan,
        "step_fraction": info.step_fraction if info else np.nan,
        "step_accepted": bool(info.accepted) if info else False,
        "sam_applied": bool(sam_applied),
        "sam_deviation": float(deviation),
        "psi_clamped": int(n_clamped),
        "value_loss": float(vloss),
        "aborted": bool(aborted),
    }


def _behaviour_clone(ens: EnsemblePolicy, demos, max_iter: int) -> None:
    """Maximum-likelihood fit of the expert-free policy to pooled demonstrations.

    The log standard deviation of a Gaussian policy is held fixed so that
    cloning a noiseless demonstration cannot collapse exploration.
    """
    states = np.vstack([d.states for d in demos])
    if ens.spec.discrete:
        actions = np.concatenate([np.asarray(d.actions).ravel() for d in demos])
    else:
        actions = np.vstack([d.actions for d in demos])
    batch = ens.batch(states, actions)
    zeta = ens.get_flat()
    n_net = ens.policy.net.n_params
    n = states.shape[0]

    def loss(net_p):
        z = zeta.copy()
        z[:n_net] = net_p
        nll = -float(np.mean(batch.log_prob(z)))
        g = -batch.grad_log_prob(z, np.full(n, 1.0 / n))[:n_net]
        return nll, g

    res = minimize(loss, zeta[:n_net], jac=True, method="L-BFGS-B", options={"maxiter": int(max_iter)})
    params = ens.policy.params.copy()
    params[:n_net] = res.x
    ens.policy.params = params


def save_policy(ens: EnsemblePolicy, path) -> None:
    Path(path).write_text(json.dumps(ens.to_dict()))
