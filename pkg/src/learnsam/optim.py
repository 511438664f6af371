"""Value fitting, advantage estimation and the trust-region policy step."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_random_state, check_states
from .nets import MLP
from .policy import EnsembleBatch, EnsemblePolicy, KLSampler

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# value function


class ValueFunction(RegressorMixin, BaseEstimator):
    """MLP state-value estimate fitted by L-BFGS on squared error.

    Repeated calls to ``fit`` continue from the previous parameters when
    ``warm_start`` is set, so each epoch refines the last estimate.
    ``loss_curve_`` holds the training loss after every optimiser iteration
    of the latest fit.
    """

    def __init__(self, hidden=(32, 32), max_iter=50, warm_start=True, state_low=None, state_high=None,
                 random_state=None):
        self.hidden = hidden
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.state_low = state_low
        self.state_high = state_high
        self.random_state = random_state

    def _normalize(self, X):
        if self.state_low is None or self.state_high is None:
            return X
        lo = np.asarray(self.state_low, dtype=np.float64)
        hi = np.asarray(self.state_high, dtype=np.float64)
        return 2.0 * (X - lo) / (hi - lo) - 1.0

    def _loss(self, params, X, y):
        out, cache = self.net_.forward(X, params)
        r = out[:, 0] - y
        loss = 0.5 * np.mean(r * r)
        grad = self.net_.vjp(cache, (r / r.size)[:, None])
        return loss, grad

    def fit(self, X, y):
        X = self._normalize(check_states(X))
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if not (self.warm_start and hasattr(self, "net_")):
            self.net_ = MLP((X.shape[1], *self.hidden, 1), check_random_state(self.random_state))
            self.n_features_in_ = X.shape[1]
        curve = [self._loss(self.net_.params, X, y)[0]]

        def record(xk):
            curve.append(self._loss(xk, X, y)[0])

        res = minimize(self._loss, self.net_.params, args=(X, y), jac=True, method="L-BFGS-B",
                       callback=record, options={"maxiter": int(self.max_iter)})
        self.net_.params = res.x
        self.loss_curve_ = np.asarray(curve)
        self.loss_ = float(res.fun)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.net_(self._normalize(check_states(X)))[:, 0]

    def __call__(self, X) -> np.ndarray:
        return self.predict(X)


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, next_values, goals, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimate over one episode.

    Goal transitions are terminal (V(s') = 0). A final non-goal transition
    was cut by the horizon and bootstraps from V(s').
    """
    r = np.asarray(rewards, dtype=np.float64)
    nv = np.where(np.asarray(goals, dtype=bool), 0.0, np.asarray(next_values, dtype=np.float64))
    delta = r + gamma * nv - np.asarray(values, dtype=np.float64)
    out = np.empty_like(delta)
    acc = 0.0
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        out[t] = acc
    return out


@dataclass
class AdvantageBatch:
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    raw_advantages: np.ndarray
    values: np.ndarray
    returns: np.ndarray


def estimate_advantages(trajs, value_fn, gamma: float, lam: float = 0.95, normalize: bool = True) -> AdvantageBatch:
    """GAE over a list of episodes; ``raw_advantages`` skip normalisation."""
    states = np.vstack([t.states for t in trajs])
    next_states = np.vstack([t.next_states for t in trajs])
    V = value_fn(states)
    V2 = value_fn(next_states)
    adv, rets = [], []
    lo = 0
    for t in trajs:
        n = len(t)
        adv.append(gae(t.rewards, V[lo : lo + n], V2[lo : lo + n], t.goals, gamma, lam))
        rets.append(returns_to_go(t.rewards, gamma))
        lo += n
    raw = np.concatenate(adv)
    a = raw
    if normalize and raw.size > 1:
        sd = raw.std()
        a = (raw - raw.mean()) / (sd if sd > 0 else 1.0)
    actions = np.concatenate([t.actions for t in trajs]) if trajs[0].actions.ndim == 1 else np.vstack(
        [t.actions for t in trajs]
    )
    return AdvantageBatch(states, actions, a, raw, V, np.concatenate(rets))


# ---------------------------------------------------------------------------
# trust-region step


@dataclass
class PolicyBatch:
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray | None = None


@dataclass(frozen=True)
class TrustRegionConfig:
    delta: float = 0.01
    cg_iters: int = 10
    damping: float = 1e-2
    backtrack: float = 0.8
    max_backtracks: int = 10
    kl_samples: int = 64

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass
class StepInfo:
    accepted: bool
    kl: float
    surrogate_before: float
    surrogate_after: float
    step_fraction: float
    grad_norm: float


def surrogate_loss(ens_old: EnsemblePolicy | None, ens_new: EnsemblePolicy, batch: PolicyBatch) -> float:
    """Mean importance-weighted advantage of ``ens_new`` against the behaviour policy.

    The behaviour log-probabilities come from ``batch.old_logp`` or, when
    absent, from ``ens_old``.
    """
    old = batch.old_logp
    if old is None:
        old = ens_old.batch(batch.states, batch.actions).log_prob(ens_old.get_flat())
    new = ens_new.batch(batch.states, batch.actions).log_prob(ens_new.get_flat()).reshape(-1)
    return float(np.mean(np.exp(new - np.reshape(old, -1)) * np.reshape(batch.advantages, -1)))


def conjugate_gradient(Avp, b, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ap = Avp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


class _Objective:
    """Surrogate, gradient, Fisher products and KL on one cached batch."""

    def __init__(self, ens: EnsemblePolicy, batch: PolicyBatch, kl_samples: int, rng):
        self.ens = ens
        self.eb = EnsembleBatch(ens, batch.states, batch.actions)
        self.zeta0 = ens.get_flat()
        logp0 = self._logp(self.zeta0)
        self.old = logp0 if batch.old_logp is None else np.asarray(batch.old_logp, dtype=np.float64).reshape(-1)
        self.adv = np.asarray(batch.advantages, dtype=np.float64).reshape(-1)
        self.ratio0 = np.exp(logp0 - self.old)
        self._kl = None if ens.spec.discrete else KLSampler(ens, batch.states, kl_samples, rng)

    def _logp(self, zeta) -> np.ndarray:
        return self.eb.log_prob(zeta).reshape(-1)

    def surrogate(self, zeta) -> float:
        return float(np.mean(np.exp(self._logp(zeta) - self.old) * self.adv))

    def gradient(self) -> np.ndarray:
        return self.eb.grad_log_prob(self.zeta0, self.ratio0 * self.adv / self.adv.size)

    def fvp(self, v) -> np.ndarray:
        return self.eb.fisher_vector_product(self.zeta0, v)

    def kl(self, zeta) -> float:
        if self._kl is None:
            return self.eb.kl_discrete(self.zeta0, zeta)
        return self._kl.kl(zeta)


def trust_region_step(ens: EnsemblePolicy, batch: PolicyBatch, cfg: TrustRegionConfig | None = None, rng=None):
    """One natural-gradient step with a KL line search.

    The ensemble is returned unchanged when no candidate both improves the
    surrogate and stays inside the trust region.
    """
    cfg = cfg or TrustRegionConfig()
    obj = _Objective(ens, batch, cfg.kl_samples, check_random_state(rng))
    L0 = obj.surrogate(obj.zeta0)
    g = obj.gradient()
    gnorm = float(np.linalg.norm(g))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("policy gradient is not finite")
    if gnorm == 0.0:
        return ens, StepInfo(False, 0.0, L0, L0, 0.0, gnorm)
    x = conjugate_gradient(lambda v: obj.fvp(v) + cfg.damping * v, g, cfg.cg_iters)
    shs = 0.5 * x @ (obj.fvp(x) + cfg.damping * x)
    if not (np.isfinite(shs) and shs > 0):
        raise NonFiniteGradientError("degenerate natural-gradient direction")
    full = x * np.sqrt(cfg.delta / shs)
    frac = 1.0
    for _ in range(cfg.max_backtracks):
        zeta = obj.zeta0 + frac * full
        L = obj.surrogate(zeta)
        kl = obj.kl(zeta)
        if np.isfinite(L) and L > L0 and kl <= cfg.delta:
            assert kl <= cfg.delta
            return ens.with_flat(zeta), StepInfo(True, float(kl), L0, L, frac, gnorm)
        frac *= cfg.backtrack
    logger.debug("line search found no acceptable step")
    return ens, StepInfo(False, 0.0, L0, L0, 0.0, gnorm)


def gradient_check(ens: EnsemblePolicy, batch: PolicyBatch, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference surrogate gradients."""
    obj = _Objective(ens, batch, 1, None)
    g = obj.gradient()
    fd = np.empty_like(g)
    for i in range(g.size):
        e = np.zeros_like(g)
        e[i] = eps
        fd[i] = (obj.surrogate(obj.zeta0 + e) - obj.surrogate(obj.zeta0 - e)) / (2 * eps)
    return float(np.max(np.abs(g - fd) / (np.abs(g) + 1e-8)))
