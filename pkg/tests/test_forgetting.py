import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhnforget import forgetting as fg
from mhnforget import hopfield as hf
from mhnforget.geometry import MemorySet, RotationEnsembleSpec, build_equal_angular, rotate_memories, sample_rotation

# beta_c(N) from the t-equation N t log t = (t - 1)(t + N - 1), solved at 40 digits with mpmath
BETA_C_REFERENCE = {
    3: 2.7456435767327243969,
    5: 3.5645018084938870349,
    10: 4.5597785602728999799,
    100: 7.4586754541471010475,
    1000: 10.110735846311919509,
    10000: 12.662822755700379145,
}


@pytest.fixture(scope="module")
def ref_set():
    return build_equal_angular(12, 50, 0.35)


def test_intrinsic_forgetting_matches_rotation_identity(ref_set):
    V = sample_rotation(50, 0.05, 4)
    x = ref_set.vectors[3]
    direct = fg.intrinsic_forgetting(x, ref_set, rotate_memories(ref_set, V), 8.0)
    via = hf.energy(V.matrix.T @ x, ref_set, 8.0) - hf.energy(x, ref_set, 8.0)
    assert direct == pytest.approx(via, abs=1e-13)


def test_intrinsic_forgetting_dimension_mismatch(ref_set):
    with pytest.raises(ValueError):
        fg.intrinsic_forgetting(np.zeros(50), ref_set, np.eye(49)[:3], 8.0)


def test_reduction_weight_values():
    assert fg.reduction_weight(1.0, 50, 8.0) == 0.0
    assert fg.reduction_weight(0.0, 50, 8.0) == pytest.approx(2 * 49 + 8)


def test_closed_form_equals_sharpness_quarter(ref_set):
    """Leakage formula and the Hessian sharpness differ only at second order in leakage."""
    fp = hf.memory_fixed_point(ref_set, 16.0, 12)
    s = hf.sharpness(fp, ref_set, 16.0).sharpness
    assert fg.closed_form_sharpness(fp, ref_set, 16.0) == pytest.approx(s, rel=1e-6)


def test_leakage_needs_dominant_pattern():
    X = build_equal_angular(12, 50, 0.9)
    fp = hf.memory_fixed_point(X, 1.0, 0)
    with pytest.raises(ValueError, match="pattern-specific"):
        fg.leakage_terms(fp, X, 1.0)


def test_zero_epsilon_has_no_rise(ref_set):
    fp = hf.memory_fixed_point(ref_set, 8.0, 12)
    rep = fg.mc_energy_rise(fp, ref_set, 8.0, RotationEnsembleSpec(0.0, 5))
    assert rep.mc_rise == 0.0 and rep.mc_stderr == 0.0


def test_mc_rise_needs_converged_fixed_point(ref_set):
    fp = hf.find_fixed_point(ref_set.vectors[0] + 0.1, ref_set, 8.0, max_iter=1)
    with pytest.raises(ValueError):
        fg.mc_energy_rise(fp, ref_set, 8.0, RotationEnsembleSpec(0.05, 3))


def test_small_ensemble_rise_near_closed_form(ref_set):
    fp = hf.memory_fixed_point(ref_set, 8.0, 12)
    rep = fg.mc_energy_rise(fp, ref_set, 8.0, RotationEnsembleSpec(0.02, 300, 5))
    assert abs(rep.mc_rise - rep.closed_form_rise) <= max(4 * rep.mc_stderr, 0.05 * rep.closed_form_rise)


def test_outlier_cluster_gap_is_positive_and_near_leading_order(ref_set):
    gap = fg.outlier_cluster_gap(ref_set, 16.0, 0.05)
    assert gap.gap > 0 and gap.leading_order > 0
    assert gap.gap == pytest.approx(gap.leading_order, rel=0.1)


def test_outlier_cluster_gap_rejects_anticorrelated():
    g = np.full((3, 3), -0.2)
    np.fill_diagonal(g, 1.0)
    lam, u = np.linalg.eigh(g)
    rows = np.zeros((4, 6))
    rows[:3, :3] = u * np.sqrt(lam)
    rows[3, 5] = 1.0
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    neg = MemorySet(rows, ("cluster",) * 3 + ("outlier",))
    with pytest.raises(ValueError, match="outside"):
        fg.outlier_cluster_gap(neg, 8.0, 0.05)


@pytest.mark.parametrize("N", sorted(BETA_C_REFERENCE))
def test_beta_critical_matches_reference(N):
    r = fg.beta_critical(N)
    assert r.beta_c == pytest.approx(BETA_C_REFERENCE[N], rel=1e-12)
    assert r.beta_c_from_tc == pytest.approx(r.beta_c, rel=1e-12)


def test_beta_critical_two_patterns_boundary():
    r = fg.beta_critical(2)
    assert (r.beta_c, r.m_c, r.t_c) == (2.0, 0.0, 1.0)
    lo, hi = fg.beta_c_bounds(2)
    assert lo <= r.beta_c <= hi


@settings(max_examples=40, deadline=None)
@given(N=st.integers(3, 10**7))
def test_beta_critical_bounds_and_tangency(N):
    r = fg.beta_critical(N)
    lo, hi = fg.beta_c_bounds(N)
    assert lo <= r.beta_c <= hi
    assert r.tangency_residual <= 1e-8 and r.tc_residual <= 1e-8
    # beta_c is the minimum over m of the objective
    ms = np.linspace(1e-4, 1 - 1e-4, 2001)
    assert r.beta_c <= min(fg._betac_objective(m, N) for m in ms) + 1e-9


def test_beta_critical_monotone_in_N():
    vals = [fg.beta_critical(N).beta_c for N in (2, 3, 5, 10, 30, 100, 1000)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_localization_flags(ref_set):
    warm = fg.localization_diagnostics(ref_set, 8.0)
    assert warm.flags["cluster"] and not warm.flags["outlier"] and not warm.localized
    assert not warm.working_regime
    cold = fg.localization_diagnostics(ref_set, 16.0)
    assert cold.localized and cold.working_regime and cold.exists


def test_below_beta_c_reported_as_nonexistent(ref_set):
    rep = fg.localization_diagnostics(ref_set, 4.0)
    assert not rep.exists


def test_energy_sharpness_scan_orders(ref_set):
    scan = fg.energy_sharpness_scan(ref_set, 8.0)
    assert scan.energy_order_holds and scan.sharpness_order_holds
    assert all(r.converged for r in scan.rows)
