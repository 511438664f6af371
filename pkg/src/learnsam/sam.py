"""Split-and-merge reparameterisation of expert policies.

At a single state with m experts and K helpfulness categories:

* ``Xi`` (m x K) holds the share of expert j assigned to category k,
* ``M`` (K x m) selects, for each category, the eligible expert with the
  largest lambda, so ``M @ lam`` gives the latent lambdas,
* the latent weights and latent policies follow from the linear maps in
  ``repar_weights`` and ``repar_policies``.

The weighted expert term sum_j w_j lam_j pi_j is unchanged by the map; the
functions here are written in matrix form, and the scalar formulas they
must agree with live in the test-suite.

Categories are ordered by their oracle score ``b``: index 0 is the least
helpful, index K-1 the most helpful.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from ._validation import check_random_state, check_states
from .policy import EnsemblePolicy

logger = logging.getLogger(__name__)

MIN_ABS_VALUE = 1e-6


@dataclass(frozen=True)
class GroupingConfig:
    """Hyper-parameters of the grouping function.

    softmax: ``b`` are the K oracle scores. normal_cdf: ``b`` are the K-1
    interior cut-offs; the normal has mean psi and standard deviation 1/c.
    """

    kind: str = "softmax"
    c: float = 4.0
    b: tuple = (-0.5, 0.5)

    def __post_init__(self):
        if self.kind not in ("softmax", "normal_cdf"):
            raise ValueError(f"unknown grouping kind {self.kind!r}")
        if not self.c > 0:
            raise ValueError("c must be positive")
        b = np.asarray(self.b, dtype=np.float64)
        if b.ndim != 1 or np.any(np.diff(b) <= 0):
            raise ValueError("b must be strictly increasing")
        object.__setattr__(self, "b", tuple(float(x) for x in b))
        if self.K < 2:
            raise ValueError("need at least two categories")

    @property
    def K(self) -> int:
        return len(self.b) if self.kind == "softmax" else len(self.b) + 1


def group_softmax(psi, cfg: GroupingConfig) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    b = np.asarray(cfg.b)
    logits = -cfg.c * np.abs(psi[..., None] - b)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def group_cdf(psi, cfg: GroupingConfig) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    cuts = ndtr((np.asarray(cfg.b) - psi[..., None]) * cfg.c)
    lo = np.concatenate([np.zeros(psi.shape + (1,)), cuts], axis=-1)
    hi = np.concatenate([cuts, np.ones(psi.shape + (1,))], axis=-1)
    return hi - lo


def group(psi, cfg: GroupingConfig) -> np.ndarray:
    return group_softmax(psi, cfg) if cfg.kind == "softmax" else group_cdf(psi, cfg)


# ---------------------------------------------------------------------------
# linear maps at one state


def build_selector(lam, w, Xi) -> np.ndarray:
    """K x m selector; row k marks the eligible expert with the largest lambda.

    Eligible means w_j * xi_jk > 0. Ties go to the smallest index. A row
    with no eligible expert stays zero.
    """
    lam = np.asarray(lam, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    Xi = np.asarray(Xi, dtype=np.float64)
    m, K = Xi.shape
    eligible = (w[:, None] * Xi) > 0
    M = np.zeros((K, m))
    for k in range(K):
        cand = np.flatnonzero(eligible[:, k])
        if cand.size == 0:
            logger.info("category %d has no eligible expert", k)
            continue
        M[k, cand[np.argmax(lam[cand])]] = 1.0
    return M


def repar_lambda(M, lam) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if M.shape[1] != lam.shape[0]:
        raise ValueError(f"selector has {M.shape[1]} columns but {lam.shape[0]} lambdas were given")
    return M @ lam


def repar_weights(Xi, lam, lam_out, w) -> np.ndarray:
    """w' = (Xi^T * ((1 / lam') lam^T)) w, with w'_k = 0 wherever lam'_k = 0."""
    Xi = np.asarray(Xi, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    lam_out = np.asarray(lam_out, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore"):
        inv = np.where(lam_out > 0, 1.0 / lam_out, 0.0)
    return (Xi.T * np.outer(inv, lam)) @ w


def repar_policies(Xi, lam, w, pi=None):
    """Mixture matrix beta (m x K) and, if ``pi`` is given, beta^T pi.

    beta = [(w*lam)(1 / ((w*lam)^T Xi))] * Xi. A category with no expert
    mass falls back to w_j xi_jk normalised (or zeros when that is empty too).
    """
    Xi = np.asarray(Xi, dtype=np.float64)
    wl = np.asarray(w, dtype=np.float64) * np.asarray(lam, dtype=np.float64)
    alpha = wl @ Xi
    with np.errstate(divide="ignore"):
        inv = np.where(alpha > 0, 1.0 / alpha, 0.0)
    beta = np.outer(wl, inv) * Xi
    empty = alpha <= 0
    if np.any(empty):
        fb = np.asarray(w, dtype=np.float64)[:, None] * Xi[:, empty]
        tot = fb.sum(axis=0)
        beta[:, empty] = np.where(tot > 0, fb / np.where(tot > 0, tot, 1.0), 0.0)
    if pi is None:
        return beta
    return beta, beta.T @ np.asarray(pi, dtype=np.float64)


def invariance_check(before, after) -> float:
    """Largest |sum_j w_j lam_j pi_j - sum_k w'_k lam'_k pi'_k| over probes.

    ``before = (w, lam, pi)``, ``after = (w', lam', pi')``; ``lam`` and ``pi``
    hold one row per probe (s, a), ``w`` is either global or per probe.
    """
    w, lam, pi = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in before)
    w2, lam2, pi2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in after)
    lhs = np.sum(w * lam * pi, axis=1)
    rhs = np.sum(w2 * lam2 * pi2, axis=1)
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# scoring


def score(q_values, acting_probs, expert_probs, min_abs_value: float = MIN_ABS_VALUE):
    """psi = sum_a pi_j(a|s) A(s, a) / |V(s)| from action values.

    V is the acting-policy average of Q, so advantages are centred exactly.
    Works on a single state (1-D inputs) or a batch (rows). Returns
    ``(psi, n_clamped)`` where ``n_clamped`` counts states whose |V| fell
    below ``min_abs_value`` and was replaced by it.
    """
    Q = np.asarray(q_values, dtype=np.float64)
    P = np.asarray(acting_probs, dtype=np.float64)
    E = np.asarray(expert_probs, dtype=np.float64)
    V = np.sum(P * Q, axis=-1)
    A = Q - V[..., None]
    small = np.abs(V) < min_abs_value
    denom = np.where(small, min_abs_value, np.abs(V))
    if E.ndim == Q.ndim + 1:  # several experts per state
        num = np.sum(E * A[..., None, :], axis=-1)
        psi = num / denom[..., None]
    else:
        psi = np.sum(E * A, axis=-1) / denom
    n_small = int(np.sum(small))
    if n_small:
        logger.debug("clamped |V| on %d state(s)", n_small)
    return psi, n_small


def action_values(env, value_fn, states, gamma: float, actions=None) -> np.ndarray:
    """One-step look-ahead Q(s, a) = r + gamma * V(s') through the env model.

    Goal states are terminal (V = 0). Discrete environments enumerate every
    action; otherwise ``actions`` (B, n, d) must be supplied.
    """
    states = check_states(states, env.spec.state_dim)
    B = states.shape[0]
    if actions is None:
        if not env.spec.discrete:
            raise ValueError("continuous action values need explicit actions")
        nA = env.spec.action_dim_or_count
        S = np.repeat(states, nA, axis=0)
        A = np.tile(np.arange(nA), B)
        shape = (B, nA)
    else:
        A = env.clip_actions(np.asarray(actions, dtype=np.float64).reshape(-1, env.spec.action_dim_or_count))
        n = A.shape[0] // B
        S = np.repeat(states, n, axis=0)
        shape = (B, n)
    S2, R, goal = env.model(S, A)
    V2 = np.where(goal, 0.0, value_fn(S2))
    return (R + gamma * V2).reshape(shape)


def _slot_samples(ens: EnsemblePolicy, k: int, states, n: int, rng) -> np.ndarray:
    B = states.shape[0]
    reps = np.repeat(states, n, axis=0)
    m = len(ens.experts)
    j = np.minimum(np.searchsorted(np.cumsum(ens.mix[k]), rng.random(reps.shape[0]), side="right"), m - 1)
    out = np.empty((reps.shape[0], ens.spec.action_dim_or_count))
    eps = rng.standard_normal(out.shape)
    for jj in np.unique(j):
        r = j == jj
        ex = ens.experts[jj]
        out[r] = ex.mean(reps[r]) + ex.std_ * eps[r]
    return out.reshape(B, n, -1)


def score_states(ens: EnsemblePolicy, states, env, value_fn, gamma: float, n_samples: int = 32, rng=None):
    """Per-state scores (B, K) of every expert slot under the acting ensemble.

    Discrete: exact enumeration of actions. Continuous: Monte Carlo with
    ``n_samples`` actions from the acting policy (for V) and from each slot.
    Returns ``(psi, abs_values, n_clamped)``; ``abs_values`` are the clamped
    |V| denominators, which ``aggregate_scores`` can use as weights.
    """
    states = check_states(states, ens.spec.state_dim)
    B, K = states.shape[0], ens.n_slots
    if ens.spec.discrete:
        Q = action_values(env, value_fn, states, gamma)
        V = np.sum(ens.predict_proba(states) * Q, axis=1)
        psi, n_small = score(Q, ens.predict_proba(states), ens.slot_probs(states)) if K else (np.zeros((B, 0)), 0)
        return psi, np.maximum(np.abs(V), MIN_ABS_VALUE), n_small
    rng = check_random_state(rng)
    acting = ens.sample(np.repeat(states, n_samples, axis=0), rng).reshape(B, n_samples, -1)
    V = action_values(env, value_fn, states, gamma, acting).mean(axis=1)
    small = np.abs(V) < MIN_ABS_VALUE
    denom = np.where(small, MIN_ABS_VALUE, np.abs(V))
    psi = np.empty((B, K))
    for k in range(K):
        Qk = action_values(env, value_fn, states, gamma, _slot_samples(ens, k, states, n_samples, rng))
        psi[:, k] = (Qk.mean(axis=1) - V) / denom
    return psi, denom, int(small.sum())


def score_from_advantages(ens: EnsemblePolicy, states, actions, advantages, values):
    """Model-free scores: importance-weighted advantages pi_k(a|s)/pi(a|s) * A / |V|."""
    states = check_states(states, ens.spec.state_dim)
    B = states.shape[0]
    adv = np.asarray(advantages, dtype=np.float64)
    denom = np.maximum(np.abs(np.asarray(values, dtype=np.float64)), MIN_ABS_VALUE)
    if ens.spec.discrete:
        a = np.asarray(actions, dtype=np.int64)
        p = ens.predict_proba(states)[np.arange(B), a]
        e = ens.slot_probs(states)[np.arange(B), :, a]
    else:
        batch = ens.batch(states, actions)
        p = np.exp(batch.log_prob(ens.get_flat())).reshape(B)
        e = np.exp(batch.log_e[:, 0, :])
    return e / p[:, None] * (adv / denom)[:, None]


def aggregate_scores(psi, lam, weights=None):
    """Lambda-weighted batch average of per-state scores, one per slot.

    Optional per-state ``weights`` multiply lambda; passing the |V|
    denominators turns the average into sum(lam * pi_k A) / sum(lam |V|),
    which states with a near-zero value estimate cannot dominate.
    Slots with no lambda mass on the batch come back as NaN.
    """
    psi = np.asarray(psi, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if weights is not None:
        lam = lam * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    mass = lam.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, (lam * psi).sum(axis=0) / mass, np.nan)


# ---------------------------------------------------------------------------
# ensemble-level application


@dataclass
class SamState:
    psi: list
    Xi: list
    M: list
    lambda_in: list
    w_in: list
    lambda_out: list
    w_out: list
    beta: list
    mix_out: list
    dropped: list = field(default_factory=list)
    deviation: float = 0.0
    skipped: bool = False
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _expert_part(ens: EnsemblePolicy, states):
    """Coefficient of each original expert in the ensemble at each state."""
    c = ens.slot_lambdas(states) * ens.weights()
    return c @ ens.mix  # (B, m)


def ensemble_deviation(old: EnsemblePolicy, new: EnsemblePolicy, states) -> float:
    """Max change of the ensemble between two parameterisations on ``states``.

    Discrete: max |p_old(a|s) - p_new(a|s)| over states and actions.
    Continuous: max L1 change of the per-original-expert coefficients.
    """
    if old.spec.discrete:
        return float(np.max(np.abs(old.predict_proba(states) - new.predict_proba(states))))
    return float(np.max(np.sum(np.abs(_expert_part(old, states) - _expert_part(new, states)), axis=1)))


def reparameterize(ens: EnsemblePolicy, states, Xi, drop_unhelpful: bool = True):
    """Apply the split-and-merge maps with a batch-level grouping matrix.

    Lambda values enter the weight and mixture maps as their batch means over
    ``states``; the new slots keep state-dependent lambdas (max over their
    members). When all merged slots share one lambda function, as with a
    single demonstration, the ensemble is reproduced exactly.
    """
    states = check_states(states, ens.spec.state_dim)
    Xi = np.asarray(Xi, dtype=np.float64)
    K_in = ens.n_slots
    if Xi.shape[0] != K_in:
        raise ValueError("grouping matrix needs one row per expert slot")
    lam_b = ens.slot_lambdas(states)
    lam_bar = lam_b.mean(axis=0)
    w = ens.weights()
    M = build_selector(lam_bar, w, Xi)
    lam_out = repar_lambda(M, lam_bar)
    w_out = repar_weights(Xi, lam_bar, lam_out, w)
    beta = repar_policies(Xi, lam_bar, w, None)
    mix_out = beta.T @ ens.mix

    keep = w_out > 0
    dropped = []
    if drop_unhelpful and Xi.shape[1] >= 2:
        keep[0] = False
        dropped.append(0)
    if np.any(~keep[1:] & (w_out[1:] <= 0)):
        logger.info("removing categories with no eligible expert")
    idx = np.flatnonzero(keep)
    new_w = w_out[idx]
    new = ens.copy()
    new.mix = mix_out[idx].copy()
    new.logits = np.log(new_w) - np.log1p(-new_w.sum()) if idx.size else np.zeros(0)
    state = SamState(
        psi=[],
        Xi=Xi.tolist(),
        M=M.tolist(),
        lambda_in=lam_bar.tolist(),
        w_in=w.tolist(),
        lambda_out=lam_out.tolist(),
        w_out=w_out.tolist(),
        beta=beta.tolist(),
        mix_out=mix_out.tolist(),
        dropped=dropped,
    )
    state.deviation = ensemble_deviation(ens, new, states)
    return new, state


def sam_apply(ens: EnsemblePolicy, states, psi, cfg: GroupingConfig, drop_unhelpful: bool = True, weights=None):
    """Score aggregation, grouping and reparameterisation for one epoch.

    ``psi`` holds per-state scores (B, K_in) from ``score_states``;
    ``weights`` are optional per-state aggregation weights. Returns
    the new ensemble and its ``SamState``; the ensemble is returned unchanged
    (``skipped``) when some slot had no lambda mass on the batch.
    """
    states = check_states(states, ens.spec.state_dim)
    if ens.n_slots == 0:
        return ens, SamState([], [], [], [], [], [], [], [], [], skipped=True, note="no experts")
    psi_bar = aggregate_scores(psi, ens.slot_lambdas(states), weights)
    if np.any(~np.isfinite(psi_bar)):
        logger.info("skipping split-and-merge: an expert slot has no lambda mass on the batch")
        st = SamState(psi_bar.tolist(), [], [], [], ens.weights().tolist(), [], [], [], [], skipped=True)
        st.note = "slot without lambda mass"
        return ens, st
    Xi = group(psi_bar, cfg)
    new, st = reparameterize(ens, states, Xi, drop_unhelpful)
    st.psi = psi_bar.tolist()
    logger.debug("split-and-merge deviation %.3g", st.deviation)
    return new, st
