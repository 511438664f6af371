"""Expert policies, the trainable expert-free policy and the localised ensemble.

The ensemble acting at state s is

    p(a|s) = (1 - sum_k lam_k(s) w_k) p_theta(a|s) + sum_k lam_k(s) w_k e_k(a|s)

where each expert slot ``e_k`` is a fixed mixture over the original
demonstration experts (the identity mixture before any split-and-merge) and
``lam_k`` is the maximum localisation weight over that slot's members.
Weights come from K+1 logits whose last entry, the expert-free slot, is
pinned at zero.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_is_fitted

from ._validation import check_random_state, check_states
from .lambdas import ConstantLambda, LambdaFunction
from .nets import MLP

FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


class EmptyDemonstrationError(ValueError):
    pass


class ZeroProbabilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# frozen experts


class TabularExpert(ClassifierMixin, BaseEstimator):
    """Smoothed empirical action frequencies per demonstrated state.

    States never seen in the demonstration get the uniform distribution.
    """

    def __init__(self, n_actions=4, smoothing=0.1):
        self.n_actions = n_actions
        self.smoothing = smoothing

    def fit(self, X, y):
        X = check_states(X)
        y = np.asarray(y, dtype=np.int64).ravel()
        if X.shape[0] == 0:
            raise EmptyDemonstrationError("cannot fit an expert to an empty demonstration")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        index: dict[tuple, int] = {}
        rows = np.empty(X.shape[0], dtype=np.int64)
        for i, key in enumerate(map(tuple, X.tolist())):
            rows[i] = index.setdefault(key, len(index))
        counts = np.zeros((len(index), self.n_actions))
        np.add.at(counts, (rows, y), 1.0)
        self.support_states_ = X
        self.classes_ = np.arange(self.n_actions)
        self._index = index
        self.table_ = (counts + self.smoothing) / (
            counts.sum(axis=1, keepdims=True) + self.smoothing * self.n_actions
        )
        self.counts_ = counts
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "table_")
        X = check_states(X)
        out = np.full((X.shape[0], self.n_actions), 1.0 / self.n_actions)
        for i, key in enumerate(map(tuple, X.tolist())):
            r = self._index.get(key)
            if r is not None:
                out[i] = self.table_[r]
        return out

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        check_is_fitted(self, "table_")
        keys = sorted(self._index, key=self._index.get)
        return {
            "kind": "tabular",
            "n_actions": int(self.n_actions),
            "smoothing": float(self.smoothing),
            "states": [list(k) for k in keys],
            "counts": self.counts_.tolist(),
            "support_states": self.support_states_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularExpert":
        ex = cls(d["n_actions"], d["smoothing"])
        ex._index = {tuple(s): i for i, s in enumerate(d["states"])}
        ex.counts_ = np.asarray(d["counts"], dtype=np.float64).reshape(-1, d["n_actions"])
        ex.table_ = (ex.counts_ + ex.smoothing) / (
            ex.counts_.sum(axis=1, keepdims=True) + ex.smoothing * ex.n_actions
        )
        ex.support_states_ = np.asarray(d["support_states"], dtype=np.float64)
        ex.classes_ = np.arange(ex.n_actions)
        return ex


class GaussianExpert(RegressorMixin, BaseEstimator):
    """Gaussian policy whose mean is a least-squares polynomial in the state.

    The per-dimension standard deviation is the residual SD of the fit,
    floored at ``min_std``.
    """

    def __init__(self, degree=2, min_std=0.05):
        self.degree = degree
        self.min_std = min_std

    def _features(self, X):
        return PolynomialFeatures(self.degree).fit_transform(X)

    def fit(self, X, y):
        X = check_states(X)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if X.shape[0] == 0:
            raise EmptyDemonstrationError("cannot fit an expert to an empty demonstration")
        Phi = self._features(X)
        coef, *_ = np.linalg.lstsq(Phi, y, rcond=None)
        resid = y - Phi @ coef
        self.coef_ = coef
        self.std_ = np.maximum(resid.std(axis=0), self.min_std)
        self.support_states_ = X
        self.n_features_in_ = X.shape[1]
        return self

    def mean(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        return self._features(check_states(X)) @ self.coef_

    predict = mean

    def log_pdf(self, X, A) -> np.ndarray:
        mu = self.mean(X)
        A = np.asarray(A, dtype=np.float64).reshape(mu.shape)
        z = (A - mu) / self.std_
        return np.sum(-0.5 * z * z - np.log(self.std_) - 0.5 * _LOG_2PI, axis=1)

    def sample(self, X, rng=None) -> np.ndarray:
        rng = check_random_state(rng)
        mu = self.mean(X)
        return mu + self.std_ * rng.standard_normal(mu.shape)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "kind": "gaussian",
            "degree": int(self.degree),
            "min_std": float(self.min_std),
            "coef": self.coef_.tolist(),
            "std": self.std_.tolist(),
            "support_states": self.support_states_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianExpert":
        ex = cls(d["degree"], d["min_std"])
        ex.coef_ = np.asarray(d["coef"], dtype=np.float64)
        ex.std_ = np.asarray(d["std"], dtype=np.float64)
        ex.support_states_ = np.asarray(d["support_states"], dtype=np.float64)
        ex.n_features_in_ = ex.support_states_.shape[1]
        return ex


@dataclass
class ExpertTrainConfig:
    smoothing: float = 0.1
    degree: int = 2
    min_std: float = 0.05


def pretrain_expert(demo, spec, cfg: ExpertTrainConfig | None = None):
    """Supervised fit of a frozen expert to a demonstration set."""
    cfg = cfg or ExpertTrainConfig()
    if len(demo) == 0:
        raise EmptyDemonstrationError("demonstration has no state-action pairs")
    if spec.discrete:
        return TabularExpert(spec.action_dim_or_count, cfg.smoothing).fit(demo.states, demo.actions)
    return GaussianExpert(cfg.degree, cfg.min_std).fit(demo.states, demo.actions)


def expert_from_dict(d: dict):
    if d.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ValueError(f"unsupported expert file version {d.get('version')}")
    if d["kind"] == "tabular":
        return TabularExpert.from_dict(d)
    if d["kind"] == "gaussian":
        return GaussianExpert.from_dict(d)
    raise ValueError(f"unknown expert kind {d['kind']!r}")


def save_expert(expert, path) -> None:
    payload = {"version": FORMAT_VERSION, **expert.to_dict()}
    Path(path).write_text(json.dumps(payload))


def load_expert(path):
    return expert_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# trainable expert-free policy


class ExpertFreePolicy:
    """Feedforward policy on normalised states.

    Discrete: the network outputs action logits. Continuous: it outputs the
    Gaussian mean, with a learnable state-independent log standard deviation
    appended to the flat parameter vector.
    """

    def __init__(self, spec, hidden=(32, 32), rng=None, init_log_std=float(np.log(0.5)), out_scale=0.01):
        self.spec = spec
        self.hidden = tuple(hidden)
        n_out = spec.action_dim_or_count
        self.net = MLP((spec.state_dim, *self.hidden, n_out))
        if rng is not None:
            self.net.init(check_random_state(rng), out_scale)
        self.n_log_std = 0 if spec.discrete else n_out
        self.params = np.concatenate([self.net.params, np.full(self.n_log_std, init_log_std)])

    @property
    def n_params(self) -> int:
        return self.params.size

    def split(self, params):
        n = self.net.n_params
        return params[:n], params[n:]

    def forward(self, states, params=None):
        params = self.params if params is None else params
        net_p, log_std = self.split(params)
        out, cache = self.net.forward(self.spec.normalize(states), net_p)
        return out, log_std, cache

    def probs(self, states, params=None) -> np.ndarray:
        out, _, _ = self.forward(states, params)
        return softmax(out, axis=1)

    def copy(self) -> "ExpertFreePolicy":
        new = copy.copy(self)
        new.net = copy.copy(self.net)
        new.params = self.params.copy()
        return new

    def to_dict(self) -> dict:
        return {"hidden": list(self.hidden), "params": self.params.tolist()}


# ---------------------------------------------------------------------------
# ensemble


class EnsemblePolicy:
    def __init__(self, policy: ExpertFreePolicy, experts=(), lambdas=(), mix=None, logits=None):
        self.policy = policy
        self.spec = policy.spec
        self.experts = list(experts)
        self.lambdas = list(lambdas)
        if len(self.experts) != len(self.lambdas):
            raise ValueError("every expert needs a lambda evaluator")
        m = len(self.experts)
        if mix is None:
            self.mix = np.eye(m)
        elif m == 0:
            self.mix = np.zeros((0, 0))
        else:
            self.mix = np.asarray(mix, dtype=np.float64).reshape(-1, m)
        K = self.mix.shape[0]
        self.logits = np.zeros(K) if logits is None else np.asarray(logits, dtype=np.float64).copy()
        if self.logits.shape != (K,):
            raise ValueError("need one trainable logit per expert slot")
        if np.any(self.mix < 0) or (K and not np.allclose(self.mix.sum(axis=1), 1.0)):
            raise ValueError("expert slot mixtures must be non-negative and sum to 1")

    # -- parameters ---------------------------------------------------------
    @property
    def n_slots(self) -> int:
        return self.mix.shape[0]

    @property
    def n_params(self) -> int:
        return self.policy.n_params + self.n_slots

    @property
    def weight_logits(self) -> np.ndarray:
        """Full logit vector; the expert-free slot is last and fixed at 0."""
        return np.append(self.logits, 0.0)

    def weights(self, logits=None) -> np.ndarray:
        u = self.logits if logits is None else logits
        return softmax(np.append(u, 0.0))[:-1]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.policy.params, self.logits])

    def split_flat(self, zeta):
        n = self.policy.n_params
        return zeta[:n], zeta[n:]

    def with_flat(self, zeta) -> "EnsemblePolicy":
        new = self.copy()
        new.policy.params, new.logits = (p.copy() for p in self.split_flat(np.asarray(zeta, float)))
        return new

    def copy(self) -> "EnsemblePolicy":
        new = copy.copy(self)
        new.policy = self.policy.copy()
        new.mix = self.mix.copy()
        new.logits = self.logits.copy()
        return new

    # -- per-state quantities -----------------------------------------------
    def original_lambdas(self, states) -> np.ndarray:
        states = check_states(states, self.spec.state_dim)
        if not self.lambdas:
            return np.zeros((states.shape[0], 0))
        return np.column_stack([lam.transform(states) for lam in self.lambdas])

    def slot_lambdas(self, states, lam_orig=None) -> np.ndarray:
        lam_orig = self.original_lambdas(states) if lam_orig is None else lam_orig
        if self.n_slots == 0:
            return np.zeros((lam_orig.shape[0], 0))
        masked = np.where(self.mix[None, :, :] > 0, lam_orig[:, None, :], -np.inf)
        return masked.max(axis=2)

    def coefficients(self, states) -> np.ndarray:
        """Mixture coefficients [c_free, c_1, ..., c_K] at each state."""
        c = self.slot_lambdas(states) * self.weights()
        return np.column_stack([1.0 - c.sum(axis=1), c])

    def expert_free_weight(self, states) -> np.ndarray:
        return self.coefficients(states)[:, 0]

    def original_probs(self, states) -> np.ndarray:
        """(B, m, A) action distributions of the original discrete experts."""
        states = check_states(states, self.spec.state_dim)
        if not self.experts:
            return np.zeros((states.shape[0], 0, self.spec.action_dim_or_count))
        return np.stack([e.predict_proba(states) for e in self.experts], axis=1)

    def slot_probs(self, states, orig=None) -> np.ndarray:
        orig = self.original_probs(states) if orig is None else orig
        return np.einsum("kj,bja->bka", self.mix, orig)

    def support_states(self, k: int) -> np.ndarray:
        members = np.flatnonzero(self.mix[k] > 0)
        return np.vstack([self.experts[j].support_states_ for j in members])

    def batch(self, states, actions=None) -> "EnsembleBatch":
        return EnsembleBatch(self, states, actions)

    # -- acting -------------------------------------------------------------
    def predict_proba(self, states) -> np.ndarray:
        if not self.spec.discrete:
            raise TypeError("predict_proba is only defined for discrete actions")
        b = self.batch(states)
        return b.probs(self.get_flat())

    def prob(self, states, actions) -> np.ndarray:
        b = self.batch(states, actions)
        return np.exp(b.log_prob(self.get_flat())).reshape(-1)

    def act(self, states) -> np.ndarray:
        """Greedy action: argmax (discrete) or mixture mean (continuous)."""
        states = check_states(states, self.spec.state_dim)
        if self.spec.discrete:
            return np.argmax(self.predict_proba(states), axis=1)
        c = self.coefficients(states)
        mu, _, _ = self.policy.forward(states)
        out = c[:, :1] * mu
        if self.n_slots:
            orig_mu = np.stack([e.mean(states) for e in self.experts], axis=1)
            slot_mu = np.einsum("kj,bjd->bkd", self.mix, orig_mu)
            out = out + np.einsum("bk,bkd->bd", c[:, 1:], slot_mu)
        return out

    def sample(self, states, rng=None) -> np.ndarray:
        """Two-stage draw: a mixture component, then an action from it."""
        rng = check_random_state(rng)
        states = check_states(states, self.spec.state_dim)
        B = states.shape[0]
        c = self.coefficients(states)
        comp = _categorical(c, rng.random(B))
        if self.spec.discrete:
            P = np.concatenate([self.policy.probs(states)[:, None, :], self.slot_probs(states)], axis=1)
            return _categorical(P[np.arange(B), comp], rng.random(B))
        mu, log_std, _ = self.policy.forward(states)
        eps = rng.standard_normal(mu.shape)
        pick = rng.random(B)
        out = mu + np.exp(log_std) * eps
        for k in range(self.n_slots):
            rows = np.flatnonzero(comp == k + 1)
            if rows.size == 0:
                continue
            j = _categorical(np.broadcast_to(self.mix[k], (rows.size, self.mix.shape[1])), pick[rows])
            for jj in np.unique(j):
                r = rows[j == jj]
                ex = self.experts[jj]
                out[r] = ex.mean(states[r]) + ex.std_ * eps[r]
        return out

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "policy": self.policy.to_dict(),
            "experts": [{"version": FORMAT_VERSION, **e.to_dict()} for e in self.experts],
            "lambdas": [lam.to_dict() for lam in self.lambdas],
            "mix": self.mix.tolist(),
            "logits": self.logits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, spec) -> "EnsemblePolicy":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported policy file version {d.get('version')}")
        pol = ExpertFreePolicy(spec, hidden=d["policy"]["hidden"])
        pol.params = np.asarray(d["policy"]["params"], dtype=np.float64)
        experts = [expert_from_dict(e) for e in d["experts"]]
        lambdas = [LambdaFunction.from_dict(x) for x in d["lambdas"]]
        m = len(experts)
        mix = np.asarray(d["mix"], dtype=np.float64).reshape(-1, m) if m else np.zeros((0, 0))
        return cls(pol, experts, lambdas, mix, np.asarray(d["logits"], dtype=np.float64))


def make_ensemble(spec, experts=(), lambda_params=None, hidden=(32, 32), rng=None, localize=True):
    """Fresh ensemble with identity slots; ``localize=False`` gives lambda == 1."""
    lambda_params = lambda_params or {}
    lambdas = []
    for ex in experts:
        if localize:
            lambdas.append(LambdaFunction(**lambda_params).fit(ex.support_states_))
        else:
            lambdas.append(ConstantLambda().fit(ex.support_states_))
    return EnsemblePolicy(ExpertFreePolicy(spec, hidden, rng=rng), experts, lambdas)


def _categorical(P, u) -> np.ndarray:
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = np.inf
    return np.argmax(cdf > u[:, None], axis=1)


# ---------------------------------------------------------------------------
# per-batch evaluation of log-probabilities, gradients and Fisher products


class EnsembleBatch:
    """Everything about a batch that does not depend on the trainable parameters.

    Lambda values and expert outputs are computed once; the methods take a
    flat parameter vector ``zeta = [theta, logits]`` and are cheap to call
    repeatedly, which is what the conjugate-gradient solve and the line
    search need.

    Continuous actions may be given with shape (B, n, d) to score ``n``
    actions per state.
    """

    def __init__(self, ens: EnsemblePolicy, states, actions=None):
        self.ens = ens
        self.spec = ens.spec
        self.states = check_states(states, self.spec.state_dim)
        B = self.states.shape[0]
        lam_orig = ens.original_lambdas(self.states)
        self.lam = ens.slot_lambdas(self.states, lam_orig)
        self.n_policy = ens.policy.n_params
        if self.spec.discrete:
            self.E = ens.slot_probs(self.states)
            self.actions = None if actions is None else np.asarray(actions, dtype=np.int64).reshape(B)
        else:
            self.actions = None
            if actions is not None:
                a = np.asarray(actions, dtype=np.float64)
                da = self.spec.action_dim_or_count
                self.actions = a.reshape(B, -1, da)
                self.log_e = self._slot_log_pdf(self.actions)

    def _slot_log_pdf(self, A) -> np.ndarray:
        ens = self.ens
        B, n, _ = A.shape
        K = ens.n_slots
        if K == 0:
            return np.zeros((B, n, 0))
        per = []
        for ex in ens.experts:
            mu = ex.mean(self.states)[:, None, :]
            z = (A - mu) / ex.std_
            per.append(np.sum(-0.5 * z * z - np.log(ex.std_) - 0.5 * _LOG_2PI, axis=2))
        per = np.stack(per, axis=2)  # (B, n, m)
        with np.errstate(divide="ignore"):
            log_mix = np.log(ens.mix)  # (K, m)
        return logsumexp(per[:, :, None, :] + log_mix[None, None], axis=3)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    # shared pieces ---------------------------------------------------------
    def _weights(self, zeta):
        _, u = self.ens.split_flat(zeta)
        return softmax(np.append(u, 0.0))[:-1]

    def _coefs(self, w):
        c = self.lam * w
        return 1.0 - c.sum(axis=1), c

    # discrete --------------------------------------------------------------
    def _discrete_forward(self, zeta):
        theta, _ = self.ens.split_flat(zeta)
        z, _, cache = self.ens.policy.forward(self.states, theta)
        p_theta = softmax(z, axis=1)
        w = self._weights(zeta)
        c0, c = self._coefs(w)
        P = c0[:, None] * p_theta + np.einsum("bk,bka->ba", c, self.E)
        return P, p_theta, w, c0, cache

    def probs(self, zeta) -> np.ndarray:
        return self._discrete_forward(zeta)[0]

    def _discrete_jvp(self, fwd, v):
        _, p_theta, w, c0, cache = fwd
        v_theta, v_u = self.ens.split_flat(v)
        net_v, _ = self.ens.policy.split(v_theta)
        dz = self.ens.policy.net.jvp(cache, net_v)
        dp_theta = p_theta * (dz - np.sum(p_theta * dz, axis=1, keepdims=True))
        dw = w * (v_u - w @ v_u)
        dc = self.lam * dw
        return c0[:, None] * dp_theta + np.einsum("bk,bka->ba", dc, self.E - p_theta[:, None, :])

    def _discrete_vjp(self, fwd, Y):
        _, p_theta, w, c0, cache = fwd
        gp = c0[:, None] * Y
        gz = p_theta * (gp - np.sum(p_theta * gp, axis=1, keepdims=True))
        g_net = self.ens.policy.net.vjp(cache, gz)
        g_c = np.einsum("ba,bka->bk", Y, self.E - p_theta[:, None, :])
        g_w = np.sum(self.lam * g_c, axis=0)
        g_u = w * (g_w - w @ g_w)
        return np.concatenate([g_net, g_u])

    # continuous ------------------------------------------------------------
    def _continuous_forward(self, zeta, A=None, log_e=None):
        A = self.actions if A is None else A
        log_e = self.log_e if log_e is None else log_e
        theta, _ = self.ens.split_flat(zeta)
        mu, log_std, cache = self.ens.policy.forward(self.states, theta)
        sd = np.exp(log_std)
        zsc = (A - mu[:, None, :]) / sd  # (B, n, d)
        log_pt = np.sum(-0.5 * zsc * zsc - log_std - 0.5 * _LOG_2PI, axis=2)
        w = self._weights(zeta)
        c0, c = self._coefs(w)
        with np.errstate(divide="ignore"):
            T = np.concatenate(
                [(np.log(c0)[:, None] + log_pt)[:, :, None], np.log(c)[:, None, :] + log_e], axis=2
            )
        logp = logsumexp(T, axis=2)
        return logp, T, zsc, sd, w, c0, cache, log_e

    def _continuous_jvp(self, fwd, v):
        logp, T, zsc, sd, w, c0, cache, log_e = fwd
        r = np.exp(T - logp[:, :, None])
        v_theta, v_u = self.ens.split_flat(v)
        net_v, v_ls = self.ens.policy.split(v_theta)
        dmu = self.ens.policy.net.jvp(cache, net_v)
        dlog_pt = np.einsum("bnd,bd->bn", zsc / sd, dmu) + np.einsum("bnd,d->bn", zsc * zsc - 1.0, v_ls)
        dw = w * (v_u - w @ v_u)
        dlog_c0 = -(self.lam @ dw) / c0
        dlog_w = v_u - w @ v_u
        return r[:, :, 0] * (dlog_pt + dlog_c0[:, None]) + np.einsum("bnk,k->bn", r[:, :, 1:], dlog_w)

    def _continuous_vjp(self, fwd, Y):
        logp, T, zsc, sd, w, c0, cache, log_e = fwd
        r0 = np.exp(T[:, :, 0] - logp)
        yr0 = Y * r0
        g_mu = np.einsum("bn,bnd->bd", yr0, zsc / sd)
        g_net = self.ens.policy.net.vjp(cache, g_mu)
        g_ls = np.einsum("bn,bnd->d", yr0, zsc * zsc - 1.0)
        # r_k / w_k = lam_k e_k / p, kept finite as w_k -> 0
        with np.errstate(divide="ignore"):
            r_over_w = self.lam[:, None, :] * np.exp(log_e - logp[:, :, None])
        g_w = np.einsum("bn,bnk->k", Y, r_over_w) - np.einsum("bn,bk->k", yr0 / c0[:, None], self.lam)
        g_u = w * (g_w - w @ g_w)
        return np.concatenate([g_net, g_ls, g_u])

    # public ----------------------------------------------------------------
    def log_prob(self, zeta) -> np.ndarray:
        """Log-probability of the stored actions, shape (B,) or (B, n)."""
        if self.spec.discrete:
            P = self.probs(zeta)
            with np.errstate(divide="ignore"):
                return np.log(P[np.arange(self.size), self.actions])
        return self._continuous_forward(zeta)[0]

    def grad_log_prob(self, zeta, weights) -> np.ndarray:
        """Gradient of sum_t weights_t * log p(a_t|s_t) with respect to zeta."""
        weights = np.asarray(weights, dtype=np.float64)
        if self.spec.discrete:
            fwd = self._discrete_forward(zeta)
            p = fwd[0][np.arange(self.size), self.actions]
            if np.any(p <= 0):
                raise ZeroProbabilityError("an observed action has zero probability")
            Y = np.zeros_like(fwd[0])
            Y[np.arange(self.size), self.actions] = weights.reshape(-1) / p
            return self._discrete_vjp(fwd, Y)
        fwd = self._continuous_forward(zeta)
        if np.any(~np.isfinite(fwd[0])):
            raise ZeroProbabilityError("an observed action has zero density")
        return self._continuous_vjp(fwd, weights.reshape(fwd[0].shape))

    def fisher_vector_product(self, zeta, v) -> np.ndarray:
        """F v with F the Fisher information of the batch-mean policy.

        Exact for discrete actions (enumerating all actions); for continuous
        actions it is the empirical Fisher at the stored actions, which were
        drawn from the policy at ``zeta``.
        """
        if self.spec.discrete:
            fwd = self._discrete_forward(zeta)
            Jv = self._discrete_jvp(fwd, v)
            P = fwd[0]
            # actions with underflowed probability carry no Fisher mass
            ratio = np.divide(Jv, P, out=np.zeros_like(Jv), where=P > 0)
            return self._discrete_vjp(fwd, ratio) / self.size
        fwd = self._continuous_forward(zeta)
        gv = self._continuous_jvp(fwd, v)
        return self._continuous_vjp(fwd, gv) / gv.size

    def kl_discrete(self, zeta_old, zeta_new) -> float:
        P = self.probs(zeta_old)
        Q = self.probs(zeta_new)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0)
        return float(np.mean(terms.sum(axis=1)))


def logprob_and_grad(ens: EnsemblePolicy, s, a):
    """log p(a|s) and its gradient over zeta = [theta, logits] for one pair."""
    states = check_states(s, ens.spec.state_dim)
    b = ens.batch(states, np.asarray(a)[None] if ens.spec.discrete else np.asarray(a).reshape(1, -1))
    zeta = ens.get_flat()
    logp = b.log_prob(zeta).reshape(-1)
    if not np.isfinite(logp[0]):
        raise ZeroProbabilityError("action has zero probability under the ensemble")
    return float(logp[0]), b.grad_log_prob(zeta, np.ones(1))


def ensemble_prob(ens: EnsemblePolicy, s, a) -> float:
    states = check_states(s, ens.spec.state_dim)
    if ens.spec.discrete:
        return float(ens.predict_proba(states)[0, int(a)])
    return float(ens.prob(states, np.asarray(a).reshape(1, -1))[0])


def ensemble_sample(ens: EnsemblePolicy, s, rng=None):
    out = ens.sample(check_states(s, ens.spec.state_dim), rng)
    return out[0]


class KLSampler:
    """Fixed Monte Carlo actions drawn from a reference policy.

    Reusing one draw across candidate parameters keeps the line-search KL
    estimates comparable.
    """

    def __init__(self, ens: EnsemblePolicy, states, n_samples=64, rng=None):
        rng = check_random_state(rng)
        states = check_states(states, ens.spec.state_dim)
        reps = np.repeat(states, n_samples, axis=0)
        A = ens.sample(reps, rng).reshape(states.shape[0], n_samples, -1)
        self.batch = EnsembleBatch(ens, states, A)
        self.ref_logp = self.batch.log_prob(ens.get_flat())

    def kl(self, zeta_new) -> float:
        return float(np.mean(self.ref_logp - self.batch.log_prob(zeta_new)))


def kl_mean(ens_old: EnsemblePolicy, ens_new: EnsemblePolicy, states, n_samples=64, rng=None) -> float:
    """Mean over states of KL(old || new)."""
    if ens_old.spec != ens_new.spec:
        raise ValueError("ensembles act on different environments")
    if ens_old.spec.discrete:
        P = ens_old.predict_proba(states)
        Q = ens_new.predict_proba(states)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(P > 0, P * (np.log(P) - np.log(Q)), 0.0)
        return float(np.mean(terms.sum(axis=1)))
    rng = check_random_state(rng)
    states = check_states(states, ens_old.spec.state_dim)
    reps = np.repeat(states, n_samples, axis=0)
    A = ens_old.sample(reps, rng)
    return float(np.mean(np.log(ens_old.prob(reps, A)) - np.log(ens_new.prob(reps, A))))
