"""State localisation weights lambda(s) = exp(-phi(d(s, D))).

``d`` is a point-to-set distance (minimum over the demonstrated states) and
``phi`` a monotone bijection of [0, inf). The resulting weight is 1 exactly
on demonstrated states and decays with distance from them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DimensionMismatchError, check_states

logger = logging.getLogger(__name__)

METRICS = ("weighted_l2", "manhattan", "zero_one")
BIJECTIONS = ("linear", "square")
_ZERO_SD = 1e-6
_CHUNK = 256


@dataclass(frozen=True)
class DistanceMetric:
    kind: str = "weighted_l2"
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.weights is not None:
            if self.kind != "weighted_l2":
                raise ValueError("weights only apply to the weighted_l2 metric")
            if np.any(np.asarray(self.weights) <= 0):
                raise ValueError("metric weights must be strictly positive")


@dataclass(frozen=True)
class Bijection:
    """phi(d) = h*d (linear) or h*d**2 (square)."""

    kind: str = "linear"
    h: float = 1.0

    def __post_init__(self):
        if self.kind not in BIJECTIONS:
            raise ValueError(f"unknown bijection {self.kind!r}")
        if not self.h > 0:
            raise ValueError("bijection scale h must be positive")

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        return self.h * d if self.kind == "linear" else self.h * d * d


def distance(metric: DistanceMetric, s, D) -> np.ndarray:
    """Minimum distance from each row of ``s`` to the set ``D``.

    ``weighted_l2`` is sqrt(sum((w_i * (s_i - x_i))**2)); ``zero_one`` returns
    0 on members of ``D`` and inf elsewhere.
    """
    D = check_states(D)
    if D.shape[0] == 0:
        raise ValueError("distance to an empty set is undefined")
    s = check_states(s)
    if s.shape[1] != D.shape[1]:
        raise DimensionMismatchError(
            f"state dimension {s.shape[1]} does not match support dimension {D.shape[1]}"
        )
    w = None
    if metric.kind == "weighted_l2":
        w = np.ones(D.shape[1]) if metric.weights is None else np.asarray(metric.weights, float)
        if w.shape != (D.shape[1],):
            raise DimensionMismatchError("metric weights must match the state dimension")
    out = np.empty(s.shape[0])
    for lo in range(0, s.shape[0], _CHUNK):
        diff = s[lo : lo + _CHUNK, None, :] - D[None, :, :]
        if metric.kind == "weighted_l2":
            d = np.sqrt(np.sum((diff * w) ** 2, axis=-1))
        elif metric.kind == "manhattan":
            d = np.sum(np.abs(diff), axis=-1)
        else:
            d = np.where(np.all(diff == 0.0, axis=-1), 0.0, np.inf)
        out[lo : lo + _CHUNK] = d.min(axis=1)
    return out


class LambdaFunction(TransformerMixin, BaseEstimator):
    """Localisation weight of one demonstration set.

    ``fit`` stores the demonstrated states; ``transform`` maps states to
    lambda values in [0, 1]. With ``weights=None`` the weighted_l2 metric uses
    the inverse per-coordinate standard deviation of the support.
    """

    def __init__(self, metric="weighted_l2", phi="linear", h=1.0, weights=None):
        self.metric = metric
        self.phi = phi
        self.h = h
        self.weights = weights

    def fit(self, X, y=None):
        X = check_states(X)
        if X.shape[0] == 0:
            raise ValueError("a lambda function needs at least one support state")
        self.support_ = X
        self.n_features_in_ = X.shape[1]
        weights = None
        if self.metric == "weighted_l2":
            if self.weights is None:
                sd = X.std(axis=0)
                flat = sd <= 0
                if np.any(flat):
                    logger.warning(
                        "support has zero spread along dims %s; using weight 1/%g",
                        np.flatnonzero(flat).tolist(),
                        _ZERO_SD,
                    )
                weights = 1.0 / np.where(flat, _ZERO_SD, sd)
            else:
                weights = np.broadcast_to(np.asarray(self.weights, float), (X.shape[1],))
            weights = tuple(float(v) for v in weights)
        self.metric_ = DistanceMetric(self.metric, weights)
        self.bijection_ = Bijection(self.phi, float(self.h))
        self._scale = np.asarray(weights) if weights is not None else np.ones(X.shape[1])
        self._tree = cKDTree(np.unique(X * self._scale, axis=0))
        return self

    def distance(self, X) -> np.ndarray:
        """Same values as the module-level ``distance``, via a KD-tree on the support."""
        check_is_fitted(self, "support_")
        X = check_states(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatchError(
                f"state dimension {X.shape[1]} does not match support dimension {self.n_features_in_}"
            )
        if self.metric == "zero_one":
            d, _ = self._tree.query(X, k=1)
            return np.where(d == 0.0, 0.0, np.inf)
        d, _ = self._tree.query(X * self._scale, k=1, p=1 if self.metric == "manhattan" else 2)
        return d

    def transform(self, X) -> np.ndarray:
        d = self.distance(X)
        with np.errstate(over="ignore"):
            return np.exp(-self.bijection_(d))

    def __call__(self, X) -> np.ndarray:
        return self.transform(X)

    def to_dict(self) -> dict:
        check_is_fitted(self, "support_")
        return {
            "kind": "lambda",
            "metric": self.metric,
            "phi": self.phi,
            "h": float(self.h),
            "weights": None if self.metric_.weights is None else list(self.metric_.weights),
            "support": self.support_.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LambdaFunction":
        if d.get("kind") == "constant":
            return ConstantLambda()
        weights = d["weights"] if d["metric"] == "weighted_l2" else None
        return cls(d["metric"], d["phi"], d["h"], weights).fit(np.asarray(d["support"]))


class ConstantLambda(TransformerMixin, BaseEstimator):
    """lambda(s) = 1 everywhere: the unlocalised ensemble."""

    def fit(self, X=None, y=None):
        self.support_ = np.zeros((0, 0)) if X is None else check_states(X)
        return self

    def transform(self, X) -> np.ndarray:
        return np.ones(check_states(X).shape[0])

    def __call__(self, X):
        return self.transform(X)

    def to_dict(self) -> dict:
        return {"kind": "constant"}


def lambda_eval(ev, s) -> float:
    return float(ev.transform(np.asarray(s, dtype=np.float64)[None] if np.ndim(s) == 1 else s)[0])


def lambda_batch(ev, states) -> np.ndarray:
    return ev.transform(states)


def union_lambda(evaluators, states) -> np.ndarray:
    """max_j lambda_j(s) over a group of evaluators."""
    vals = [ev.transform(states) for ev in evaluators]
    if not vals:
        return np.zeros(check_states(states).shape[0])
    return np.max(np.vstack(vals), axis=0)
