"""Modern Hopfield energy landscape.

    E(xi | X; beta) = -(1/beta) * logsumexp_i(beta * x_i . xi) + |xi|^2 / 2

Every function accepts either a :class:`~mhnforget.geometry.MemorySet` or a raw
``(N, d)`` array of memories, and ``beta`` either as a float or as
:class:`LandscapeParams`.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import logsumexp, softmax

from .geometry import MemorySet

DEFAULT_TOL = 1e-13
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True)
class LandscapeParams:
    beta: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and positive, got {self.beta}")


@dataclass(frozen=True)
class FixedPointResult:
    state: np.ndarray
    weights: np.ndarray
    iterations: int
    residual: float
    converged: bool
    seed_memory_index: int = -1
    tol: float = DEFAULT_TOL

    @property
    def dominant_index(self) -> int:
        return int(np.argmax(self.weights))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["state"] = [float(v) for v in self.state]
        out["weights"] = [float(v) for v in self.weights]
        return out


@dataclass(frozen=True)
class SharpnessReport:
    energy_at_fp: float
    hessian_trace: float
    sharpness: float
    perturbation_sharpness: float | None = None


def as_beta(beta: float | LandscapeParams) -> float:
    if isinstance(beta, LandscapeParams):
        return beta.beta
    return LandscapeParams(float(beta)).beta


def as_rows(X: MemorySet | np.ndarray) -> np.ndarray:
    if isinstance(X, MemorySet):
        return X.vectors
    x = np.asarray(X, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"memories must be a 2-d array, got shape {x.shape}")
    return x


def _check_state(xi: np.ndarray, rows: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (rows.shape[1],):
        raise ValueError(f"state of shape {xi.shape} does not match memory dimension {rows.shape[1]}")
    if not np.all(np.isfinite(xi)):
        raise ValueError("state has non-finite components")
    return xi


def energy(xi, X, beta) -> float:
    rows = as_rows(X)
    b = as_beta(beta)
    xi = _check_state(xi, rows)
    return float(-logsumexp(b * (rows @ xi)) / b + 0.5 * (xi @ xi))


def softmax_weights(xi, X, beta) -> np.ndarray:
    rows = as_rows(X)
    b = as_beta(beta)
    xi = _check_state(xi, rows)
    return softmax(b * (rows @ xi))


def update(xi, X, beta) -> np.ndarray:
    """One retrieval step T(xi) = sum_i p_i(xi) x_i."""
    rows = as_rows(X)
    return softmax_weights(xi, rows, beta) @ rows


def energy_gradient(xi, X, beta) -> np.ndarray:
    return np.asarray(xi, dtype=float) - update(xi, X, beta)


def hessian(xi, X, beta) -> np.ndarray:
    """Exact Hessian I - beta * (sum_i p_i x_i x_i^T - T T^T).

    At a fixed point T(xi) = xi; elsewhere the covariance is still centred on T(xi),
    which is what differentiating the gradient gives.
    """
    rows = as_rows(X)
    b = as_beta(beta)
    p = softmax_weights(xi, rows, b)
    t = p @ rows
    cov = (rows.T * p) @ rows - np.outer(t, t)
    return np.eye(rows.shape[1]) - b * cov


def find_fixed_point(
    init,
    X,
    beta,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    damping: float = 0.0,
    seed_memory_index: int = -1,
) -> FixedPointResult:
    """Iterate xi <- (1 - damping) T(xi) + damping xi until the step is below ``tol``.

    Non-convergence is reported through ``converged=False``; it is not an error.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    rows = as_rows(X)
    b = as_beta(beta)
    xi = _check_state(init, rows).copy()
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        new = (1.0 - damping) * (softmax(b * (rows @ xi)) @ rows) + damping * xi
        residual = float(np.linalg.norm(new - xi))
        xi = new
        if residual <= tol:
            break
    weights = softmax(b * (rows @ xi))
    return FixedPointResult(
        state=xi,
        weights=weights,
        iterations=it,
        residual=residual,
        converged=bool(residual <= tol),
        seed_memory_index=int(seed_memory_index),
        tol=tol,
    )


def memory_fixed_point(X, beta, index: int, **kwargs) -> FixedPointResult:
    """Fixed point reached from memory ``index``."""
    rows = as_rows(X)
    return find_fixed_point(rows[index], rows, beta, seed_memory_index=index, **kwargs)


def sharpness_from_hessian(xi: np.ndarray, h: np.ndarray) -> float:
    return float((xi @ xi) * np.trace(h) - xi @ h @ xi)


def sharpness(fp: FixedPointResult, X, beta) -> SharpnessReport:
    """Local basin sharpness |xi*|^2 tr H* - xi*^T H* xi*."""
    if not fp.converged:
        raise ValueError("sharpness is defined at a converged fixed point only")
    h = hessian(fp.state, X, beta)
    return SharpnessReport(
        energy_at_fp=energy(fp.state, X, beta),
        hessian_trace=float(np.trace(h)),
        sharpness=sharpness_from_hessian(fp.state, h),
    )


def perturbation_sharpness(
    x, X, beta, M: int = 100, scale: float = 1e-2, seed: int = 0
) -> float:
    """Mean energy increase under M isotropic Gaussian kicks of std ``scale``, over scale^2.

    At a fixed point this tends to tr(H) / 2 as ``scale`` -> 0.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not scale > 0:
        raise ValueError("scale must be positive")
    rows = as_rows(X)
    b = as_beta(beta)
    x = _check_state(x, rows)
    rng = np.random.default_rng(seed)
    deltas = scale * rng.standard_normal((M, rows.shape[1]))
    e0 = energy(x, rows, b)
    rises = [energy(x + dlt, rows, b) - e0 for dlt in deltas]
    return float(np.mean(rises) / scale**2)
