"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class DimensionMismatchError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


def check_states(X, state_dim: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, state_dim).

    A single 1-D state is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0)
    if state_dim is not None and X.shape[1] != state_dim:
        raise DimensionMismatchError(
            f"expected states of dimension {state_dim}, got {X.shape[1]}"
        )
    return X


def check_discrete_actions(a, n_actions: int) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 0:
        a = a[None]
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise InvalidActionError("discrete actions must be integers")
        a = a.astype(np.int64)
    if np.any(a < 0) or np.any(a >= n_actions):
        raise InvalidActionError(f"action index out of range [0, {n_actions})")
    return a.astype(np.int64)


def check_continuous_actions(a, low, high, atol: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if not np.all(np.isfinite(a)):
        raise InvalidActionError("continuous action has non-finite entries")
    if np.any(a < np.asarray(low) - atol) or np.any(a > np.asarray(high) + atol):
        raise InvalidActionError("continuous action outside declared bounds")
    return a


def check_probability_rows(P, atol: float = 1e-12) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < -atol) or np.any(P > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(P.sum(axis=-1), 1.0, atol=atol * max(1, P.shape[-1])):
        raise ValueError("probability rows must sum to 1")
    return P


def check_random_state(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
