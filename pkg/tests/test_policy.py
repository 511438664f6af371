import json

import numpy as np
import pytest
from scipy.special import softmax

from learnsam.lambdas import LambdaFunction
from learnsam.mdp import EnvironmentSpec, GridWorld, PointMass
from learnsam.policy import (
    EmptyDemonstrationError,
    EnsemblePolicy,
    ExpertFreePolicy,
    ExpertTrainConfig,
    GaussianExpert,
    TabularExpert,
    ensemble_prob,
    ensemble_sample,
    kl_mean,
    load_expert,
    logprob_and_grad,
    make_ensemble,
    pretrain_expert,
    save_expert,
)

from conftest import Demo

GRID = GridWorld(5).spec
POINT = PointMass().spec


def fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_ensemble(spec, rng, m=2, hidden=(6,), localize=True):
    experts = []
    for _ in range(m):
        S = rng.integers(0, 5, size=(12, 2)).astype(float) if spec.discrete else rng.uniform(-1, 1, (12, 2))
        A = rng.integers(0, 4, size=12) if spec.discrete else rng.uniform(-1, 1, (12, 2))
        experts.append(pretrain_expert(Demo(S, A), spec))
    ens = make_ensemble(spec, experts, {"h": 0.7}, hidden, rng, localize=localize)
    ens.logits = rng.normal(size=m)
    ens.policy.params = ens.policy.params + rng.normal(0, 0.5, ens.policy.n_params)
    return ens


def linear_policy(spec, bias, log_std=0.0):
    pol = ExpertFreePolicy(spec, hidden=())
    p = np.zeros(pol.n_params)
    n_net = pol.net.n_params
    p[n_net - len(bias) : n_net] = bias
    if pol.n_log_std:
        p[n_net:] = log_std
    pol.params = p
    return pol


# -- experts -------------------------------------------------------------


def test_tabular_frequencies():
    s = [[1.0, 1.0]] * 3
    ex = pretrain_expert(Demo(s, [0, 0, 0]), GRID, ExpertTrainConfig(smoothing=0.0))
    assert ex.predict_proba([[1.0, 1.0]])[0, 0] == 1.0
    ex = pretrain_expert(Demo(s + [[1.0, 1.0]], [0, 0, 0, 1]), GRID, ExpertTrainConfig(smoothing=0.0))
    assert ex.predict_proba([[1.0, 1.0]])[0, 0] == 0.75
    # unseen states fall back to uniform
    np.testing.assert_array_equal(ex.predict_proba([[3.0, 3.0]]), [[0.25] * 4])


def test_tabular_smoothing_keeps_support_positive():
    ex = TabularExpert(4, 0.1).fit([[0.0, 0.0]], [2])
    p = ex.predict_proba([[0.0, 0.0]])[0]
    assert np.all(p > 0) and p.sum() == pytest.approx(1.0, abs=1e-15)
    assert p[2] == pytest.approx(1.1 / 1.4)


def test_gaussian_expert_fits_noiseless_line(rng):
    S = rng.uniform(-1, 1, (40, 2))
    ex = pretrain_expert(Demo(S, 2 * S), POINT)
    np.testing.assert_allclose(ex.mean([[1.0, 1.0]]), [[2.0, 2.0]], atol=1e-6)
    np.testing.assert_array_equal(ex.std_, [0.05, 0.05])


def test_empty_demo_rejected():
    with pytest.raises(EmptyDemonstrationError):
        pretrain_expert(Demo(np.zeros((0, 2)), np.zeros(0)), GRID)


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_expert_file_roundtrip(spec, rng, tmp_path):
    ex = random_ensemble(spec, rng, m=1).experts[0]
    save_expert(ex, tmp_path / "e.json")
    back = load_expert(tmp_path / "e.json")
    S = rng.uniform(0, 4, (6, 2))
    if spec.discrete:
        np.testing.assert_array_equal(back.predict_proba(S), ex.predict_proba(S))
    else:
        np.testing.assert_array_equal(back.mean(S), ex.mean(S))
    bad = json.loads((tmp_path / "e.json").read_text())
    bad["version"] = 99
    (tmp_path / "e.json").write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        load_expert(tmp_path / "e.json")


# -- ensemble probabilities ----------------------------------------------


def test_no_experts_is_policy(rng):
    ens = random_ensemble(GRID, rng, m=0)
    S = rng.integers(0, 5, (10, 2)).astype(float)
    np.testing.assert_array_equal(ens.predict_proba(S), ens.policy.probs(S))


def test_far_states_ignore_experts(rng):
    ens = random_ensemble(GRID, rng, m=2)
    ens.lambdas = [LambdaFunction("zero_one").fit(e.support_states_) for e in ens.experts]
    far = np.array([[40.0, 40.0]])
    np.testing.assert_allclose(ens.predict_proba(far), ens.policy.probs(far), rtol=0, atol=1e-15)


def test_hand_example():
    """lam = 1, w = 0.5, p_theta(a) = 0.2, expert(a) = 0.8 gives 0.5."""
    s = [[1.0, 1.0]]
    pol = linear_policy(GRID, np.log([0.2, 0.8 / 3, 0.8 / 3, 0.8 / 3]))
    ex = pretrain_expert(Demo(s * 5, [0, 0, 0, 0, 1]), GRID, ExpertTrainConfig(smoothing=0.0))
    ens = EnsemblePolicy(pol, [ex], [LambdaFunction().fit(s)])
    assert ens.weights()[0] == 0.5
    assert ensemble_prob(ens, s[0], 0) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_coefficients_form_a_convex_combination(spec, rng):
    for _ in range(10):
        ens = random_ensemble(spec, rng, m=3)
        c = ens.coefficients(rng.uniform(-1, 4, (50, 2)))
        assert np.all((c >= 0) & (c <= 1))
        np.testing.assert_allclose(c.sum(axis=1), 1.0, rtol=0, atol=1e-15)


def test_discrete_probabilities_sum_to_one(rng):
    ens = random_ensemble(GRID, rng, m=3)
    P = ens.predict_proba(rng.integers(0, 5, (30, 2)).astype(float))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-14)


def test_continuous_density_integrates_to_one(rng):
    ens = random_ensemble(POINT, rng, m=2)
    for ex in ens.experts:
        ex.std_ = np.array([0.2, 0.3])
    g = np.arange(-5.0, 5.0, 0.02) + 0.01
    A = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    s = rng.uniform(-0.5, 0.5, (1, 2))
    dens = ens.prob(np.repeat(s, len(A), axis=0), A)
    assert dens.sum() * 0.02**2 == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_vanishing_weights_recover_policy(spec, rng):
    ens = random_ensemble(spec, rng, m=2)
    ens.logits = np.full(2, -60.0)
    S = rng.uniform(0, 4, (20, 2))
    if spec.discrete:
        np.testing.assert_allclose(ens.predict_proba(S), ens.policy.probs(S), atol=1e-9)
    else:
        A = rng.uniform(-1, 1, (20, 2))
        mu, log_std, _ = ens.policy.forward(S)
        z = (A - mu) / np.exp(log_std)
        ref = np.exp(np.sum(-0.5 * z * z - log_std - 0.5 * np.log(2 * np.pi), axis=1))
        np.testing.assert_allclose(ens.prob(S, A), ref, atol=1e-9)


# -- sampling ------------------------------------------------------------


def test_sampling_matches_policy_distribution(rng):
    ens = random_ensemble(GRID, rng, m=0)
    s = np.array([[2.0, 3.0]])
    draws = ens.sample(np.repeat(s, 10_000, axis=0), rng)
    p = ens.policy.probs(s)[0]
    freq = np.bincount(draws, minlength=4) / 10_000
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / 10_000))


def test_saturated_expert_is_always_followed(rng):
    s = [[1.0, 2.0]]
    ex = pretrain_expert(Demo(s, [3]), GRID, ExpertTrainConfig(smoothing=0.0))
    ens = EnsemblePolicy(ExpertFreePolicy(GRID, (4,), rng), [ex], [LambdaFunction().fit(s)], logits=[60.0])
    assert np.all(ens.sample(np.repeat(s, 500, axis=0), rng) == 3)


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_sampling_is_reproducible(spec, rng):
    ens = random_ensemble(spec, rng)
    s = np.array([1.0, 1.0])
    a = ensemble_sample(ens, s, np.random.default_rng(9))
    b = ensemble_sample(ens, s, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


# -- gradients -----------------------------------------------------------


def test_gradient_without_experts_is_categorical_score():
    pol = linear_policy(GRID, np.array([0.1, -0.3, 0.2, 0.0]))
    pol.params[:8] = [0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.3]
    ens = EnsemblePolicy(pol)
    s, a = np.array([1.0, 3.0]), 2
    logp, g = logprob_and_grad(ens, s, a)
    x = GRID.normalize(s[None])[0]
    p = softmax(x @ pol.params[:8].reshape(2, 4) + pol.params[8:12])
    d = np.eye(4)[a] - p
    assert logp == pytest.approx(np.log(p[a]), abs=1e-14)
    np.testing.assert_allclose(g, np.concatenate([np.outer(x, d).ravel(), d]), atol=1e-14)


def test_gradient_without_experts_is_gaussian_score():
    pol = linear_policy(POINT, np.array([0.2, -0.1]), log_std=np.log(0.7))
    ens = EnsemblePolicy(pol)
    s, a = np.array([0.3, -0.5]), np.array([0.5, 0.4])
    logp, g = logprob_and_grad(ens, s, a)
    x = POINT.normalize(s[None])[0]
    mu = np.array([0.2, -0.1])
    z = (a - mu) / 0.7
    d_mu = z / 0.7
    expected = np.concatenate([np.outer(x, d_mu).ravel(), d_mu, z * z - 1])
    np.testing.assert_allclose(g, expected, atol=1e-13)


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_gradient_matches_finite_differences(spec, rng):
    worst = 0.0
    for _ in range(20):
        ens = random_ensemble(spec, rng, m=int(rng.integers(0, 4)))
        s = rng.uniform(0, 4, 2) if spec.discrete else rng.uniform(-1, 1, 2)
        a = int(rng.integers(0, 4)) if spec.discrete else rng.uniform(-1, 1, 2)
        _, g = logprob_and_grad(ens, s, a)
        assert g.size == ens.n_params  # only policy parameters and weight logits
        fd = fd_grad(lambda z: logprob_and_grad(ens.with_flat(z), s, a)[0], ens.get_flat())
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12))
    assert worst < 1e-5


@pytest.mark.parametrize("spec", [GRID, POINT])
def test_experts_are_not_touched_by_updates(spec, rng):
    ens = random_ensemble(spec, rng)
    before = [json.dumps(e.to_dict()) for e in ens.experts]
    ens2 = ens.with_flat(ens.get_flat() + 1.0)
    assert [json.dumps(e.to_dict()) for e in ens2.experts] == before


def test_fisher_product_is_kl_curvature(rng):
    ens = random_ensemble(GRID, rng, m=2)
    S = rng.integers(0, 5, (40, 2)).astype(float)
    b = ens.batch(S)
    z = ens.get_flat()
    for _ in range(3):
        v = rng.normal(size=z.size)
        h = 1e-4
        curv = (b.kl_discrete(z, z + h * v) + b.kl_discrete(z, z - h * v)) / h**2
        assert v @ b.fisher_vector_product(z, v) == pytest.approx(curv, rel=1e-5)


def test_empirical_fisher_continuous(rng):
    ens = random_ensemble(POINT, rng, m=2)
    S = rng.uniform(-1, 1, (25, 2))
    A = rng.uniform(-1, 1, (25, 2))
    b = ens.batch(S, A)
    z = ens.get_flat()
    G = np.array([b.grad_log_prob(z, np.eye(25)[i]) for i in range(25)])
    v = rng.normal(size=z.size)
    np.testing.assert_allclose(b.fisher_vector_product(z, v), G.T @ (G @ v) / 25, atol=1e-12)


# -- KL ------------------------------------------------------------------


def test_kl_identical_is_zero(rng):
    ens = random_ensemble(GRID, rng)
    S = rng.integers(0, 5, (30, 2)).astype(float)
    assert abs(kl_mean(ens, ens.copy(), S)) < 1e-12


def test_kl_of_unit_gaussians(rng):
    a = EnsemblePolicy(linear_policy(POINT, np.zeros(2)))
    b = EnsemblePolicy(linear_policy(POINT, np.array([1.0, 0.0])))
    S = np.zeros((200, 2))
    kl = kl_mean(a, b, S, n_samples=64, rng=rng)
    assert kl == pytest.approx(0.5, abs=4 / np.sqrt(200 * 64))


def test_kl_is_non_negative(rng):
    S = rng.integers(0, 5, (20, 2)).astype(float)
    for _ in range(100):
        a = random_ensemble(GRID, rng, m=1, hidden=(3,))
        b = a.with_flat(a.get_flat() + rng.normal(0, 0.5, a.n_params))
        assert kl_mean(a, b, S) >= 0


def test_ensemble_serialisation(rng):
    ens = random_ensemble(POINT, rng)
    back = EnsemblePolicy.from_dict(json.loads(json.dumps(ens.to_dict())), POINT)
    S = rng.uniform(-1, 1, (5, 2))
    A = rng.uniform(-1, 1, (5, 2))
    np.testing.assert_array_equal(back.prob(S, A), ens.prob(S, A))


def test_bad_construction():
    pol = ExpertFreePolicy(GRID, (3,))
    with pytest.raises(ValueError):
        EnsemblePolicy(pol, [TabularExpert().fit([[0.0, 0.0]], [0])], [])
    with pytest.raises(ValueError):
        EnsemblePolicy(pol, logits=[0.0])


def test_empty_ensemble_serialisation(rng):
    ens = random_ensemble(GRID, rng, m=0)
    back = EnsemblePolicy.from_dict(json.loads(json.dumps(ens.to_dict())), GRID)
    S = rng.integers(0, 5, (5, 2)).astype(float)
    np.testing.assert_array_equal(back.predict_proba(S), ens.predict_proba(S))
