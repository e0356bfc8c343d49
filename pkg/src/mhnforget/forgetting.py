"""Intrinsic forgetting: energy rises under task shifts and their closed-form predictors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import hopfield as hf
from .geometry import CLUSTER, OUTLIER, MemorySet, RotationEnsembleSpec, iter_rotations

DEFAULT_SIGMA_BAND = 3.0


@dataclass(frozen=True)
class ForgettingReport:
    """Rotation-averaged energy rise at one fixed point.

    ``draws`` holds E(V^T xi | X) - E(xi | X) per rotation in draw order.
    """

    mc_rise: float
    mc_stderr: float
    closed_form_rise: float
    lambda_terms: list[tuple[float, float, float]]
    ensemble: RotationEnsembleSpec
    draws: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.mc_stderr < 0:
            raise ValueError("standard error cannot be negative")


@dataclass(frozen=True)
class CriticalTemperature:
    N: int
    beta_c: float
    m_c: float
    t_c: float
    tangency_residual: float = 0.0
    tc_residual: float = 0.0
    beta_c_from_tc: float = float("nan")

    def bounds(self) -> tuple[float, float]:
        return beta_c_bounds(self.N)


@dataclass(frozen=True)
class OutlierClusterGap:
    gap: float
    leading_order: float
    rise_outlier: float
    rise_cluster: float


@dataclass(frozen=True)
class LocalizationReport:
    outlier_leak: float  # beta N e^{-beta}
    cluster_leak: float  # beta (1 - c) (N - 1) e^{-beta (1 - c)}
    single_leak: float  # beta e^{-beta}
    threshold: float
    flags: dict[str, bool]
    beta_c: float
    beta_eff: float
    exists: bool
    working_regime: bool

    @property
    def localized(self) -> bool:
        return not any(self.flags.values())


def intrinsic_forgetting(x, X_old, X_new, beta) -> float:
    """Energy rise E(x | X_new) - E(x | X_old)."""
    old = hf.as_rows(X_old)
    new = hf.as_rows(X_new)
    if old.shape[1] != new.shape[1]:
        raise ValueError(f"dimension mismatch: {old.shape[1]} vs {new.shape[1]}")
    return hf.energy(x, new, beta) - hf.energy(x, old, beta)


def reduction_weight(alpha, d: int, beta: float):
    """Lambda(alpha) = 2 (d - 1)(1 - alpha) + beta (1 - alpha^2)."""
    alpha = np.asarray(alpha, dtype=float)
    return 2.0 * (d - 1) * (1.0 - alpha) + beta * (1.0 - alpha**2)


def leakage_terms(fp: hf.FixedPointResult, X, beta) -> list[tuple[float, float, float]]:
    """(alpha_j, eta_j, Lambda(alpha_j)) for every non-dominant memory j."""
    rows = hf.as_rows(X)
    b = hf.as_beta(beta)
    k = fp.dominant_index
    if fp.weights[k] < 0.5:
        raise ValueError(
            f"fixed point is not pattern-specific: largest weight {fp.weights[k]:.3g} < 0.5"
        )
    alphas = rows @ rows[k]
    out = []
    for j in range(rows.shape[0]):
        if j == k:
            continue
        out.append((float(alphas[j]), float(fp.weights[j]), float(reduction_weight(alphas[j], rows.shape[1], b))))
    return out


def closed_form_rise(fp: hf.FixedPointResult, X, beta, epsilon: float) -> float:
    """(eps^2 / 4) [(d - 1) - sum_j eta_j Lambda(alpha_j)] with the solver's own weights."""
    d = hf.as_rows(X).shape[1]
    terms = leakage_terms(fp, X, beta)
    return 0.25 * epsilon**2 * ((d - 1) - sum(eta * lam for _, eta, lam in terms))


def closed_form_sharpness(fp: hf.FixedPointResult, X, beta) -> float:
    d = hf.as_rows(X).shape[1]
    return (d - 1) - sum(eta * lam for _, eta, lam in leakage_terms(fp, X, beta))


def closed_form_energy(fp: hf.FixedPointResult, X, beta) -> float:
    """-1/2 - (1/beta) sum_j eta_j."""
    b = hf.as_beta(beta)
    return -0.5 - sum(eta for _, eta, _ in leakage_terms(fp, X, beta)) / b


def rotation_rises(xi: np.ndarray, X, beta, ens: RotationEnsembleSpec) -> np.ndarray:
    """Per-draw E(V^T xi | X) - E(xi | X), which equals E(xi | V X) - E(xi | X)."""
    rows = hf.as_rows(X)
    b = hf.as_beta(beta)
    e0 = hf.energy(xi, rows, b)
    if ens.epsilon == 0:
        return np.zeros(ens.count)
    return np.array([hf.energy(v.matrix.T @ xi, rows, b) - e0 for v in iter_rotations(rows.shape[1], ens)])


def rotation_rises_multi(states: np.ndarray, X, beta, ens: RotationEnsembleSpec) -> np.ndarray:
    """Rises for several states on one shared pass over the ensemble, shape (K, count)."""
    rows = hf.as_rows(X)
    b = hf.as_beta(beta)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if ens.epsilon == 0:
        return np.zeros((states.shape[0], ens.count))
    e0 = np.array([hf.energy(s, rows, b) for s in states])
    out = np.empty((states.shape[0], ens.count))
    for t, v in enumerate(iter_rotations(rows.shape[1], ens)):
        moved = states @ v.matrix  # rows are V^T xi
        out[:, t] = [hf.energy(m, rows, b) for m in moved]
    return out - e0[:, None]


def mean_and_stderr(draws: np.ndarray) -> tuple[float, float]:
    draws = np.asarray(draws, dtype=float)
    if draws.size < 2:
        return float(draws.mean()), 0.0
    return float(draws.mean()), float(draws.std(ddof=1) / np.sqrt(draws.size))


def mc_energy_rise(fp: hf.FixedPointResult, X, beta, ens: RotationEnsembleSpec) -> ForgettingReport:
    if not fp.converged:
        raise ValueError("Monte-Carlo rise needs a converged fixed point")
    draws = rotation_rises(fp.state, X, beta, ens)
    mean, se = mean_and_stderr(draws)
    try:
        terms = leakage_terms(fp, X, beta)
        cf = closed_form_rise(fp, X, beta, ens.epsilon)
    except ValueError:
        terms, cf = [], float("nan")
    return ForgettingReport(mean, se, cf, terms, ens, draws)


def _cluster_geometry(X: MemorySet) -> tuple[int, float, int, int]:
    cl = X.cluster_indices
    out = X.outlier_indices
    if len(cl) < 1 or len(out) < 1:
        raise ValueError("memory set needs tagged cluster and outlier rows")
    return len(cl), X.measured_cluster_cosine(), int(cl[0]), int(out[0])


def leading_order_gap(N: int, d: int, c: float, beta: float, epsilon: float) -> float:
    """(eps^2/4)(N - 1)[e^{-beta(1-c)} Lambda(c) - e^{-beta} Lambda(0)]."""
    lam_c = reduction_weight(c, d, beta)
    lam_0 = reduction_weight(0.0, d, beta)
    return 0.25 * epsilon**2 * (N - 1) * (np.exp(-beta * (1 - c)) * lam_c - np.exp(-beta) * lam_0)


def outlier_cluster_gap(X: MemorySet, beta, epsilon: float, tol: float = hf.DEFAULT_TOL) -> OutlierClusterGap:
    """Closed-form rise gap between the outlier and the first cluster fixed point."""
    b = hf.as_beta(beta)
    N, c, i_cl, i_out = _cluster_geometry(X)
    if not 0.0 < c < 1.0:
        raise ValueError(
            f"cluster cosine {c:.3g} is outside (0, 1): the ordering is only claimed there "
            "and its sign can reverse for anti-correlated clusters"
        )
    fp_o = hf.memory_fixed_point(X, b, i_out, tol=tol)
    fp_c = hf.memory_fixed_point(X, b, i_cl, tol=tol)
    r_o = closed_form_rise(fp_o, X, b, epsilon)
    r_c = closed_form_rise(fp_c, X, b, epsilon)
    return OutlierClusterGap(r_o - r_c, float(leading_order_gap(N, X.dim, c, b, epsilon)), r_o, r_c)


def _log_ratio(m: float, N: int) -> float:
    return float(np.log1p((N - 1) * m) - np.log1p(-m))


def _betac_objective(m: float, N: int) -> float:
    return _log_ratio(m, N) / m


def _tangency_residual(m: float, N: int) -> float:
    """log[(1+(N-1)m)/(1-m)] - N m / ((1-m)(1+(N-1)m)); zero at the tangency point."""
    return _log_ratio(m, N) - N * m / ((1.0 - m) * (1.0 + (N - 1) * m))


def beta_c_bounds(N: int) -> tuple[float, float]:
    ln = np.log(N)
    l1 = np.log1p(ln)
    return float(ln + 1.0), float(ln + l1 + 1.0 + l1 / ln)


def beta_critical(N: int) -> CriticalTemperature:
    """Smallest beta_eff at which pattern-specific cluster fixed points exist."""
    if N < 2:
        raise ValueError("beta_c is defined for N >= 2")
    lo, hi = 1e-8, 1.0 - 1e-8
    if _tangency_residual(1e-4, N) <= 0:
        # objective increasing from m = 0 (N = 2): the infimum sits at the m -> 0 limit
        return CriticalTemperature(N, float(N), 0.0, 1.0, 0.0, 0.0, float(N))
    res = minimize_scalar(_betac_objective, bounds=(lo, hi), args=(N,), method="bounded",
                          options={"xatol": 1e-12})
    m0 = float(res.x)
    # polish on the tangency condition (sign change across the minimizer)
    a, b = m0, m0
    while _tangency_residual(a, N) <= 0 and a > lo:
        a = max(lo, a * 0.5)
    while _tangency_residual(b, N) >= 0 and b < hi:
        b = min(hi, b + 0.5 * (1.0 - b))
    m_c = brentq(_tangency_residual, a, b, args=(N,), xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    beta_c = N / ((1.0 - m_c) * (1.0 + (N - 1) * m_c))
    t_c = (1.0 + (N - 1) * m_c) / (1.0 - m_c)
    lhs = N * t_c * np.log(t_c)
    rhs = (t_c - 1.0) * (t_c + N - 1.0)
    tc_res = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)
    tan_res = abs(_tangency_residual(m_c, N)) / max(_log_ratio(m_c, N), 1.0)
    return CriticalTemperature(
        N, float(beta_c), float(m_c), float(t_c), float(tan_res), float(tc_res),
        float((t_c + N - 1.0) ** 2 / (N * t_c)),
    )


def localization_diagnostics(
    X: MemorySet, beta, threshold: float = 0.1, regime_factor: float = 4.0
) -> LocalizationReport:
    """Leakage sizes against ``threshold`` plus existence and working-regime flags.

    The working regime beta >> log N is operationalized as beta >= regime_factor * log N.
    """
    b = hf.as_beta(beta)
    N, c, _, _ = _cluster_geometry(X)
    out_leak = b * N * np.exp(-b)
    cl_leak = b * (1 - c) * (N - 1) * np.exp(-b * (1 - c))
    single = b * np.exp(-b)
    flags = {
        "outlier": bool(out_leak >= threshold),
        "cluster": bool(cl_leak >= threshold),
        "single": bool(single >= threshold),
    }
    bc = beta_critical(N).beta_c if N >= 2 else 0.0
    beta_eff = b * (1 - c)
    working = bool(N < 2 or b >= regime_factor * np.log(N))
    return LocalizationReport(
        float(out_leak), float(cl_leak), float(single), threshold, flags,
        float(bc), float(beta_eff), bool(beta_eff > bc), working,
    )


@dataclass(frozen=True)
class ScanRow:
    index: int
    role: str
    energy: float
    sharpness: float
    closed_form_energy: float
    closed_form_sharpness: float
    converged: bool


@dataclass(frozen=True)
class EnergySharpnessScan:
    rows: list[ScanRow]
    energy_order_holds: bool
    sharpness_order_holds: bool


def energy_sharpness_scan(X: MemorySet, beta, tol: float = hf.DEFAULT_TOL) -> EnergySharpnessScan:
    """Energy and sharpness at every memory's fixed point, exact and first-order in leakage."""
    b = hf.as_beta(beta)
    rows = []
    for i in range(X.n):
        fp = hf.memory_fixed_point(X, b, i, tol=tol)
        rep = hf.sharpness(fp, X, b)
        try:
            cfe, cfs = closed_form_energy(fp, X, b), closed_form_sharpness(fp, X, b)
        except ValueError:
            cfe = cfs = float("nan")
        rows.append(ScanRow(i, X.roles[i], rep.energy_at_fp, rep.sharpness, cfe, cfs, fp.converged))
    cl = [r for r in rows if r.role == CLUSTER]
    out = [r for r in rows if r.role == OUTLIER]
    e_ok = s_ok = False
    if cl and out:
        e_ok = min(r.energy for r in out) > max(r.energy for r in cl)
        s_ok = min(r.sharpness for r in out) > max(r.sharpness for r in cl)
    return EnergySharpnessScan(rows, bool(e_ok), bool(s_ok))
