import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from mhnforget import diffusion as dm
from mhnforget import hopfield as hf
from mhnforget.geometry import build_equal_angular, build_multi_cluster, rotate_memories, sample_rotation


@pytest.fixture(scope="module")
def small_set():
    return build_equal_angular(5, 8, 0.4)


def _fd_grad(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


@pytest.mark.parametrize("sched", [dm.ve_schedule(), dm.vp_schedule()], ids=["ve", "vp"])
@pytest.mark.parametrize("t", [30, 40, 50])
def test_score_is_gradient_of_log_marginal(small_set, sched, t):
    x = np.random.default_rng(t).standard_normal(8) * 0.5
    s = dm.exact_score(x, small_set, sched, t)
    fd = _fd_grad(lambda v: dm.log_marginal(v, small_set, sched, t), x)
    assert np.linalg.norm(s - fd) <= 1e-6 * max(np.linalg.norm(s), 1.0)


def test_log_marginal_integrates_to_one():
    X = build_equal_angular(2, 3, 0.2, with_outlier=False).vectors[:, :2]
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    sched = dm.ve_schedule()
    g = np.linspace(-4, 4, 201)
    xx, yy = np.meshgrid(g, g)
    dens = np.exp([dm.log_marginal(p, X, sched, 45) for p in np.column_stack([xx.ravel(), yy.ravel()])])
    mass = dens.sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("t", [20, 40, 48])
def test_ve_score_vanishes_at_hopfield_fixed_points(small_set, t):
    sched = dm.ve_schedule()
    for i in range(small_set.n):
        fp = hf.memory_fixed_point(small_set, sched.matched_beta(t), i)
        assert np.max(np.abs(dm.exact_score(fp.state, small_set, sched, t))) * sched.taus[t] ** 2 <= 1e-12


@pytest.mark.parametrize("t", [5, 10, 15])
def test_vp_score_zero_is_scaled_hopfield_fixed_point(small_set, t):
    """Zeros x of the VP score satisfy x / theta = update(x / theta) at beta = theta^2 / tau^2."""
    sched = dm.vp_schedule()
    theta, tau = sched.thetas[t], sched.taus[t]
    b = theta**2 / tau**2
    fp = hf.memory_fixed_point(small_set, b, 0)
    assert np.max(np.abs(dm.exact_score(theta * fp.state, small_set, sched, t))) * tau**2 <= 1e-12


def test_last_ve_step_is_hopfield_update(small_set):
    sched = dm.ve_schedule()
    x = np.random.default_rng(1).standard_normal(8) * 0.1 + small_set.vectors[2]
    out = dm.reverse_sample(x, small_set, sched, "drift_only", t_start=1)
    np.testing.assert_allclose(out, hf.update(x, small_set, sched.matched_beta(1)), atol=1e-14)


def test_score_undefined_at_zero_noise(small_set):
    with pytest.raises(ValueError, match="tau is zero"):
        dm.exact_score(np.zeros(8), small_set, dm.ve_schedule(), 0)
    with pytest.raises(ValueError):
        dm.ve_schedule().matched_beta(0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        dm.DiffusionSchedule(dm.VE, np.array([0.0, 0.5, 0.4]), np.ones(3))
    with pytest.raises(ValueError):
        dm.ve_schedule(steps=0)
    vp = dm.vp_schedule()
    np.testing.assert_allclose(vp.thetas**2 + vp.taus**2, 1.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["ve", "vp"])
def test_drift_only_recovers_memory(small_set, kind):
    sched = dm.ve_schedule() if kind == "ve" else dm.vp_schedule()
    t = 5 if kind == "ve" else 1  # tau below 0.1 in both schedules
    rng = np.random.default_rng(3)
    for i in range(small_set.n):
        xt = dm.forward_corrupt(small_set.vectors[i], sched, t, rng.standard_normal(8))
        xh = dm.reverse_sample(xt, small_set, sched, "drift_only", t_start=t)
        assert np.max(np.abs(xh - small_set.vectors[i])) <= 1e-3


def test_reconstruction_reproducible_and_zero_at_origin(small_set):
    sched = dm.ve_schedule()
    a = dm.reconstruct(small_set.vectors[0], small_set, sched, 40, generations=3, seed=4, sample_key=2)
    b = dm.reconstruct(small_set.vectors[0], small_set, sched, 40, generations=3, seed=4, sample_key=2)
    c = dm.reconstruct(small_set.vectors[0], small_set, sched, 40, generations=3, seed=4, sample_key=3)
    assert a == b and a != c
    assert dm.reconstruct(small_set.vectors[0], small_set, sched, 0) == 0.0


def test_trajectory_ends_at_sample(small_set):
    sched = dm.ve_schedule()
    traj = dm.reverse_sample(np.ones(8), small_set, sched, seed=1, t_start=10, return_trajectory=True)
    end = dm.reverse_sample(np.ones(8), small_set, sched, seed=1, t_start=10)
    assert traj.shape == (11, 8) and np.array_equal(traj[-1], end)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 40))
def test_spearman_matches_scipy(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 6, n).astype(float)  # ties included
    b = a + rng.standard_normal(n)
    expected = spearmanr(a, b).statistic
    if np.isfinite(expected):
        assert dm.spearman(a, b) == pytest.approx(expected, abs=1e-12)


def test_permutation_pvalue():
    a = np.arange(50.0)
    assert dm.permutation_pvalue(a, a, n_perm=199) == pytest.approx(1 / 200)
    p = dm.permutation_pvalue(a, np.random.default_rng(0).permutation(a), n_perm=199)
    assert 0.01 < p <= 1.0
    assert dm.permutation_pvalue(a, -a, n_perm=99, alternative="two-sided") == pytest.approx(0.01)


def test_equal_count_bins():
    vals = np.random.default_rng(0).standard_normal(103)
    labels = dm.equal_count_bins(vals, 8)
    counts = np.bincount(labels)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 103
    assert all(vals[labels == k].max() <= vals[labels == k + 1].min() for k in range(7))
    with pytest.raises(ValueError):
        dm.equal_count_bins(vals, 0)


@pytest.fixture(scope="module")
def desk_pair():
    X, _ = build_multi_cluster([0.3, 0.8], 8, 6, 16, seed=2)
    return X, rotate_memories(X, sample_rotation(16, 0.1, 5))


def test_forgetting_report(desk_pair, tmp_path):
    X, X2 = desk_pair
    rep = dm.forgetting_vs_energy(X, X2, dm.ve_schedule(), 40, n_perm=50, with_sharpness=True)
    assert rep.beta == pytest.approx(dm.ve_schedule().matched_beta(40))
    assert rep.energy.shape == rep.recon_error.shape == (X.n,) and np.all(rep.recon_error >= 0)
    assert rep.sharpness is not None and np.isfinite(rep.sharpness_correlation)
    assert rep.to_csv(tmp_path / "r.csv").read_text().startswith("sample_index,role,energy,recon_mse\n")


def test_replay_sweep_consistent(desk_pair):
    X, X2 = desk_pair
    sched = dm.ve_schedule()
    base = dm.recon_errors(X, X2, sched, 40, 1, 0, "stochastic")
    sw = dm.replay_sweep(X, X2, sched, "high_energy", 4, 40, n_bins=4)
    np.testing.assert_array_equal(sw.baseline_error, base)
    assert len(sw.buffer) == 4 and sw.bin_mean().shape == (4,)
    np.testing.assert_allclose(sw.bin_sum().sum(), sw.reduction.sum(), atol=1e-12)


def test_replaying_everything_in_drift_mode_restores_old_memories(desk_pair):
    """With every task-1 row in the model, drift-only reconstruction from small noise returns the memory."""
    X, X2 = desk_pair
    sched = dm.ve_schedule()
    sw = dm.replay_sweep(X, X2, sched, "high_energy", X.n, 5, mode="drift_only", n_bins=2)
    assert np.max(sw.buffer_error) <= 1e-6
