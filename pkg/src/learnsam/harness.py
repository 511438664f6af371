"""Experiment runs, baselines, sweeps and summary metrics."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, env_params
from .demo import (
    DemonstrationSet,
    ReferenceExpert,
    ReferenceExpertConfig,
    load_reference_expert,
    sample_demonstration,
    sparsify,
    train_reference_expert,
)
from .learner import LearnSAM, TrainingLog
from .mdp import make_env

logger = logging.getLogger(__name__)

CENSORED = "censored"
BASELINES = ("trpo", "pretrain", "naive_ensemble")


@dataclass
class RunResult:
    method: str
    seed: int
    log: TrainingLog
    demos: list
    estimator: LearnSAM
    threshold: float

    @property
    def iterations(self):
        return iterations_to_threshold(self.log, self.threshold)

    @property
    def final_reward(self) -> float:
        return float(self.log.eval_rewards[-1])


def build_env(cfg: RunConfig):
    return make_env(**env_params(cfg.env))


def reference_expert(cfg: RunConfig, env) -> ReferenceExpert:
    if cfg.demo.expert_path:
        return load_reference_expert(cfg.demo.expert_path, env)
    rc = ReferenceExpertConfig(
        analytic=cfg.demo.analytic_expert,
        n_epochs=cfg.demo.expert_epochs,
        hidden=tuple(cfg.policy.hidden),
        seed=cfg.seed,
    )
    return train_reference_expert(env, rc)


def _demo_rng(cfg: RunConfig) -> np.random.Generator:
    # separate from the learner's streams so demo knobs never touch training randomness
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD3]))


def make_demonstrations(cfg: RunConfig, env, expert=None) -> list[DemonstrationSet]:
    if cfg.demo.m == 0:
        return []
    expert = expert or reference_expert(cfg, env)
    rng = _demo_rng(cfg)
    return [sample_demonstration(expert, env, cfg.demo.noise_sd, cfg.demo.n_pairs, rng) for _ in range(cfg.demo.m)]


def make_estimator(cfg: RunConfig, env, method: str) -> LearnSAM:
    return LearnSAM(
        env=env,
        method=method,
        hidden=tuple(cfg.policy.hidden),
        metric=cfg.lam.metric,
        phi=cfg.lam.phi,
        h=cfg.lam.h,
        sam=cfg.sam.enabled,
        grouping=cfg.sam.grouping,
        c=cfg.sam.c,
        b=tuple(cfg.sam.b),
        drop_unhelpful=cfg.sam.drop_unhelpful,
        sam_interval=cfg.sam.interval,
        psi_samples=cfg.sam.psi_samples,
        delta=cfg.trpo.delta,
        cg_iters=cfg.trpo.cg_iters,
        damping=cfg.trpo.damping,
        backtrack=cfg.trpo.backtrack,
        max_backtracks=cfg.trpo.max_backtracks,
        gae_lambda=cfg.trpo.gae_lambda,
        normalize_advantages=cfg.trpo.normalize_advantages,
        value_hidden=tuple(cfg.policy.value_hidden),
        value_iters=cfg.trpo.value_iters,
        steps_per_epoch=cfg.steps_per_epoch,
        n_epochs=cfg.n_epochs,
        eval_episodes=cfg.budget.eval_episodes,
        smoothing=cfg.policy.smoothing,
        pretrain_iters=cfg.policy.pretrain_iters,
        random_state=cfg.seed,
    )


def _threshold(demos) -> float:
    if not demos:
        return float("nan")
    return float(np.mean([d.source_quality for d in demos]))


def run_method(cfg: RunConfig, method: str, demos=None, env=None) -> RunResult:
    env = env or build_env(cfg)
    if demos is None:
        demos = make_demonstrations(cfg, env) if method != "trpo" else []
    est = make_estimator(cfg, env, method).fit(demos)
    return RunResult(method, cfg.seed, est.log_, list(demos), est, _threshold(demos))


def run_learn_sam(cfg: RunConfig, demos=None) -> RunResult:
    """Demonstrations from the reference expert, then the full training loop."""
    return run_method(cfg, "learn_sam", demos)


def run_baseline(cfg: RunConfig, kind: str, demos=None) -> RunResult:
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    return run_method(cfg, kind, demos)


# ---------------------------------------------------------------------------
# metrics


def _rewards_and_epochs(log):
    if isinstance(log, TrainingLog):
        return log.eval_rewards, log.column("epoch").astype(int)
    r = np.asarray(log, dtype=np.float64)
    return r, np.arange(1, r.size + 1)


def iterations_to_threshold(log, threshold: float):
    """First epoch whose evaluation reward reaches ``threshold``, else ``CENSORED``.

    A ``TrainingLog`` reports its own epoch numbers (0 is the untrained
    policy); a plain sequence of rewards is numbered from 1.
    """
    rewards, epochs = _rewards_and_epochs(log)
    hit = np.flatnonzero(rewards >= threshold)
    return int(epochs[hit[0]]) if hit.size else CENSORED


def convergence_check(log, window: int, eps: float) -> bool:
    """True when evaluation reward moved by less than ``eps`` over the trailing window."""
    if window < 2:
        raise ValueError("window must be >= 2")
    rewards, _ = _rewards_and_epochs(log)
    if rewards.size < window:
        return False
    tail = rewards[-window:]
    return bool(np.max(np.abs(np.diff(tail))) < eps)


@dataclass
class MetricReport:
    method: str
    n_runs: int
    final_mean: float
    final_sd: float
    iterations_mean: float
    iterations_sd: float
    iterations_median: float
    n_censored: int
    budget_epochs: int
    extra: dict = field(default_factory=dict)

    FIELDS = ("method", "n_runs", "final_mean", "final_sd", "iterations_mean", "iterations_sd",
              "iterations_median", "n_censored", "budget_epochs")

    @classmethod
    def from_results(cls, method: str, results, budget_epochs: int, threshold=None) -> "MetricReport":
        finals = np.array([r.final_reward for r in results])
        its = [iterations_to_threshold(r.log, r.threshold if threshold is None else threshold) for r in results]
        done = np.array([i for i in its if i != CENSORED], dtype=np.float64)
        n_cens = len(its) - done.size
        # censored runs count as "beyond the budget" for the median
        padded = np.array([budget_epochs + 1 if i == CENSORED else i for i in its], dtype=np.float64)
        return cls(
            method,
            len(results),
            float(finals.mean()) if finals.size else float("nan"),
            float(finals.std()) if finals.size else float("nan"),
            float(done.mean()) if done.size else float("nan"),
            float(done.std()) if done.size else float("nan"),
            float(np.median(padded)) if padded.size else float("nan"),
            n_cens,
            budget_epochs,
        )

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def write_metrics(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricReport.FIELDS)
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("axis", "value", "method", "seed", "final_reward", "iterations", "source_quality", "n_pairs",
                 "noise_sd")


def sweep(cfg: RunConfig, axis: str, values, methods, seeds: int, out=None):
    """Every value x method x seed cell at the configured step budget.

    Quality varies the demonstration noise at a fixed size; sparsity draws
    the largest demonstration once per seed and subsamples it.
    Returns ``(rows, reports)``; reports are keyed by (value, method).
    """
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in ("quality", "sparsity"):
        raise ValueError("axis must be quality or sparsity")
    rows, results = [], {}
    for seed in range(seeds):
        base = copy.deepcopy(cfg)
        base.seed = cfg.seed + seed
        env = build_env(base)
        expert = reference_expert(base, env) if any(m != "trpo" for m in methods) else None
        full = None
        if axis == "sparsity" and expert is not None:
            big = copy.deepcopy(base)
            big.demo.n_pairs = int(max(values))
            full = make_demonstrations(big, env, expert)
        for value in values:
            run_cfg = copy.deepcopy(base)
            if axis == "quality":
                run_cfg.demo.noise_sd = float(value)
                demos = make_demonstrations(run_cfg, env, expert) if expert is not None else []
            else:
                run_cfg.demo.n_pairs = int(value)
                rng = np.random.default_rng(np.random.SeedSequence([base.seed, 0x5A, int(value)]))
                demos = [sparsify(d, int(value), rng) for d in full] if full is not None else []
            for method in methods:
                res = run_method(run_cfg, method, demos if method != "trpo" else [], env)
                its = iterations_to_threshold(res.log, _threshold(demos)) if demos else CENSORED
                rows.append({
                    "axis": axis,
                    "value": value,
                    "method": method,
                    "seed": base.seed,
                    "final_reward": res.final_reward,
                    "iterations": its,
                    "source_quality": _threshold(demos),
                    "n_pairs": run_cfg.demo.n_pairs,
                    "noise_sd": run_cfg.demo.noise_sd,
                })
                res.threshold = _threshold(demos)
                results.setdefault((value, method), []).append(res)
    reports = {k: MetricReport.from_results(k[1], v, cfg.n_epochs) for k, v in results.items()}
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows, reports
