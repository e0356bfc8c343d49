import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhnforget import hopfield as hf
from mhnforget.geometry import build_equal_angular


def _central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 8), rng.integers(2, 7)
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, rng.standard_normal(d), float(rng.uniform(0.5, 8.0))


def test_single_memory_energy():
    x = np.array([1.0, 0.0, 0.0])
    # -(1/b) * b * 1 + 1/2
    assert hf.energy(x, x[None], 3.0) == pytest.approx(-0.5, abs=1e-15)


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        hf.energy(np.ones(2), np.eye(2), 0.0)


def test_state_dimension_checked():
    with pytest.raises(ValueError, match="does not match"):
        hf.energy(np.ones(3), np.eye(2), 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_central_differences(seed):
    X, xi, b = _random_instance(seed)
    g = hf.energy_gradient(xi, X, b)
    fd = _central_grad(lambda v: hf.energy(v, X, b), xi)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_hessian_matches_central_differences(seed):
    X, xi, b = _random_instance(seed)
    H = hf.hessian(xi, X, b)
    fd = np.array([_central_grad(lambda v: hf.energy_gradient(v, X, b)[i], xi, 1e-5) for i in range(xi.size)])
    assert np.linalg.norm(H - fd) <= 1e-5 * max(np.linalg.norm(H), 1.0)
    np.testing.assert_allclose(H, H.T, atol=1e-14)


def test_fixed_point_is_stationary():
    X = build_equal_angular(12, 50, 0.35)
    fp = hf.memory_fixed_point(X, 8.0, 0)
    assert fp.converged and fp.residual <= 1e-13
    assert np.linalg.norm(hf.energy_gradient(fp.state, X, 8.0)) < 1e-12
    assert fp.dominant_index == 0


def test_non_convergence_is_reported():
    X = build_equal_angular(12, 50, 0.35)
    fp = hf.find_fixed_point(X.vectors[0] + 0.3, X, 8.0, max_iter=1)
    assert not fp.converged
    with pytest.raises(ValueError):
        hf.sharpness(fp, X, 8.0)


def test_damping_reaches_same_fixed_point():
    X = build_equal_angular(6, 10, 0.3)
    a = hf.memory_fixed_point(X, 10.0, 6)
    b = hf.memory_fixed_point(X, 10.0, 6, damping=0.5)
    np.testing.assert_allclose(a.state, b.state, atol=1e-12)


def test_sharpness_formula():
    X = build_equal_angular(4, 6, 0.3)
    fp = hf.memory_fixed_point(X, 6.0, 0)
    rep = hf.sharpness(fp, X, 6.0)
    H = hf.hessian(fp.state, X, 6.0)
    xi = fp.state
    assert rep.sharpness == pytest.approx((xi @ xi) * np.trace(H) - xi @ H @ xi, rel=1e-14)


def test_perturbation_sharpness_tends_to_half_trace():
    """E[delta^T H delta] / 2 = scale^2 tr H / 2 for isotropic kicks."""
    X = build_equal_angular(12, 50, 0.35)
    fp = hf.memory_fixed_point(X, 8.0, 12)
    trH = np.trace(hf.hessian(fp.state, X, 8.0))
    est = hf.perturbation_sharpness(fp.state, X, 8.0, M=4000, scale=1e-3, seed=1)
    # relative MC error of a chi^2_50 mean over 4000 draws is about 0.3%
    assert est == pytest.approx(trH / 2, rel=0.02)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_update_is_convex_combination(seed):
    X, xi, b = _random_instance(seed)
    p = hf.softmax_weights(xi, X, b)
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p >= 0)
    assert np.linalg.norm(hf.update(xi, X, b)) <= 1.0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_energy_bounded_below(seed):
    """logsumexp <= max + log N and Cauchy-Schwarz give E >= -1/2 - log(N)/beta for unit rows."""
    X, xi, b = _random_instance(seed)
    assert hf.energy(xi, X, b) >= -0.5 - np.log(len(X)) / b - 1e-12


def test_fixed_point_to_dict_roundtrip():
    X = build_equal_angular(3, 4, 0.2)
    d = hf.memory_fixed_point(X, 5.0, 1).to_dict()
    assert d["seed_memory_index"] == 1 and len(d["state"]) == 4
