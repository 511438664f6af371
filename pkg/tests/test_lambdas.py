import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from learnsam._validation import DimensionMismatchError
from learnsam.lambdas import (
    Bijection,
    ConstantLambda,
    DistanceMetric,
    LambdaFunction,
    distance,
    lambda_batch,
    lambda_eval,
    union_lambda,
)

coords = st.floats(-5, 5, allow_nan=False)


def test_distance_examples():
    D = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert distance(DistanceMetric("weighted_l2", (1.0, 1.0)), [0.0, 0.0], D)[0] == 1.0
    assert distance(DistanceMetric("weighted_l2"), D[1], D)[0] == 0.0
    assert distance(DistanceMetric("manhattan"), [2.0, 3.0], [[0.0, 0.0]])[0] == 5.0
    assert distance(DistanceMetric("zero_one"), [[1.0, 0.0], [1.0, 1.0]], D).tolist() == [0.0, np.inf]


def test_distance_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        distance(DistanceMetric("manhattan"), [0.0, 0.0, 0.0], [[0.0, 0.0]])
    lf = LambdaFunction("manhattan").fit([[0.0, 0.0]])
    with pytest.raises(DimensionMismatchError):
        lf.transform([[0.0, 0.0, 0.0]])


def test_lambda_values():
    lf = LambdaFunction("weighted_l2", "linear", 1.0, weights=1.0).fit([[0.0, 0.0]])
    assert lambda_eval(lf, [0.0, 0.0]) == 1.0
    assert lambda_eval(lf, [1.0, 0.0]) == pytest.approx(np.exp(-1.0), abs=1e-15)
    sq = LambdaFunction("weighted_l2", "square", 1.0, weights=1.0).fit([[0.0, 0.0]])
    assert lambda_eval(sq, [2.0, 0.0]) == pytest.approx(0.018315638888734, rel=1e-12)


def test_default_weights_are_inverse_sd():
    X = np.array([[0.0, 0.0], [2.0, 4.0]])
    lf = LambdaFunction().fit(X)
    np.testing.assert_allclose(lf.metric_.weights, [1.0, 0.5])


def test_zero_spread_dimension_is_flagged(caplog):
    lf = LambdaFunction().fit([[1.0, 0.0], [1.0, 2.0]])
    assert lf.metric_.weights[0] == pytest.approx(1e6)
    assert "zero spread" in caplog.text


def test_batch_matches_scalar_and_permutes(rng):
    D = rng.normal(size=(20, 2))
    lf = LambdaFunction("manhattan", h=0.7).fit(D)
    np.testing.assert_array_equal(lambda_batch(lf, D), np.ones(20))
    S = rng.normal(size=(15, 2))
    out = lambda_batch(lf, S)
    perm = rng.permutation(15)
    np.testing.assert_array_equal(lambda_batch(lf, S[perm]), out[perm])
    assert lambda_batch(lf, S[:1])[0] == lambda_eval(lf, S[0])


@pytest.mark.parametrize("metric", ["weighted_l2", "manhattan", "zero_one"])
def test_tree_lookup_agrees_with_scan(metric, rng):
    D = np.round(rng.normal(size=(200, 3)), 1)
    S = np.vstack([np.round(rng.normal(size=(100, 3)), 1), D[:10]])
    lf = LambdaFunction(metric).fit(D)
    np.testing.assert_allclose(lf.distance(S), distance(lf.metric_, S, D), rtol=1e-12, atol=1e-12)


@given(D=arrays(np.float64, (6, 2), elements=coords), S=arrays(np.float64, (8, 2), elements=coords))
def test_lambda_bounds_and_support(D, S):
    for metric in ("weighted_l2", "manhattan", "zero_one"):
        lf = LambdaFunction(metric, weights=1.0 if metric == "weighted_l2" else None).fit(D)
        lam = lf.transform(S)
        assert np.all((lam >= 0) & (lam <= 1))
        assert np.all(lf.transform(D) == 1.0)


@given(D=arrays(np.float64, (5, 2), elements=coords), S=arrays(np.float64, (10, 2), elements=coords))
def test_lambda_monotone_in_distance(D, S):
    for metric in ("weighted_l2", "manhattan"):
        lf = LambdaFunction(metric, h=0.5, weights=1.0 if metric == "weighted_l2" else None).fit(D)
        d = lf.distance(S)
        lam = lf.transform(S)
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(lam[order]) <= 0)


@pytest.mark.parametrize("d", [2.0, 3.0, 5.0])
def test_linear_dominates_square_beyond_one(d):
    lin = LambdaFunction("manhattan", "linear", 1.0).fit([[0.0]])
    sq = LambdaFunction("manhattan", "square", 1.0).fit([[0.0]])
    assert lin.transform([[d]])[0] > sq.transform([[d]])[0]


@given(
    parts=st.lists(arrays(np.float64, (4, 2), elements=coords), min_size=1, max_size=4),
    S=arrays(np.float64, (6, 2), elements=coords),
    phi=st.sampled_from(["linear", "square"]),
)
def test_union_closure(parts, S, phi):
    evs = [LambdaFunction("weighted_l2", phi, 0.8, weights=(1.0, 2.0)).fit(P) for P in parts]
    union = LambdaFunction("weighted_l2", phi, 0.8, weights=(1.0, 2.0)).fit(np.vstack(parts))
    np.testing.assert_allclose(union_lambda(evs, S), union.transform(S), rtol=0, atol=1e-12)


def test_invalid_configs():
    with pytest.raises(ValueError):
        DistanceMetric("cosine")
    with pytest.raises(ValueError):
        Bijection("linear", 0.0)
    with pytest.raises(ValueError):
        LambdaFunction().fit(np.zeros((0, 2)))


def test_serialisation_roundtrip(rng):
    lf = LambdaFunction("weighted_l2", "square", 0.3).fit(rng.normal(size=(10, 2)))
    back = LambdaFunction.from_dict(lf.to_dict())
    S = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(back.transform(S), lf.transform(S))
    assert isinstance(LambdaFunction.from_dict(ConstantLambda().fit().to_dict()), ConstantLambda)
