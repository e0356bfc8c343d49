"""Replay gains at Task-1 fixed points after a rotation task shift.

A replayed Task-1 sample ``x_r`` is appended to the rotated memory set as one
extra logit term. At a fixed point ``xi_k`` the raw gain is

    R(V) = E(xi_k | V X) - E(xi_k | V X + {x_r}) = (1/beta) log(1 + p_{r|k} e^{beta dE_k(V)})

with ``p_{r|k}`` the Task-1 softmax weight of ``x_r`` at ``xi_k``. Both sides are
evaluated independently and must agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import hopfield as hf
from .forgetting import mean_and_stderr
from .geometry import MemorySet, RotationEnsembleSpec, RotationMatrix, iter_rotations
from .io import json_text, write_csv, write_json

CONSISTENCY_TOL = 1e-10
POLICIES = ("high_energy", "low_energy", "random")


class InternalConsistencyError(RuntimeError):
    """Direct and identity-based gains disagree beyond :data:`CONSISTENCY_TOL`."""


def susceptibility(p):
    """rho(p) = p / (1 + p) for p in [0, 1]."""
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"susceptibility needs p in [0, 1], got {p}")
    out = arr / (1.0 + arr)
    return float(out) if out.ndim == 0 else out


def replay_weight(xi, X, x_r, beta) -> float:
    """p_{r|k}: weight of x_r against the Task-1 partition sum at xi."""
    rows = hf.as_rows(X)
    b = hf.as_beta(beta)
    xi = np.asarray(xi, dtype=float)
    return float(np.exp(b * (x_r @ xi) - logsumexp(b * (rows @ xi))))


def _check_pair(fp: hf.FixedPointResult, rows: np.ndarray, x_r) -> np.ndarray:
    x_r = np.asarray(x_r, dtype=float)
    if x_r.shape != (rows.shape[1],) or fp.state.shape != (rows.shape[1],):
        raise ValueError(
            f"dimension mismatch: memories are {rows.shape[1]}-d, replay sample {x_r.shape}, "
            f"fixed point {fp.state.shape}"
        )
    return x_r


def _rot(V, d: int) -> np.ndarray:
    v = V.matrix if isinstance(V, RotationMatrix) else np.asarray(V, dtype=float)
    if v.shape != (d, d):
        raise ValueError(f"rotation of shape {v.shape} does not act on R^{d}")
    return v


def raw_replay_gain(fp: hf.FixedPointResult, X, x_r, V, beta) -> float:
    """E(xi | V X) - E(xi | V X with x_r appended), by direct energy evaluation."""
    rows = hf.as_rows(X)
    x_r = _check_pair(fp, rows, x_r)
    v = _rot(V, rows.shape[1])
    rotated = rows @ v.T
    return hf.energy(fp.state, rotated, beta) - hf.energy(fp.state, np.vstack([rotated, x_r]), beta)


def exact_identity_gain(p: float, energy_rise: float, beta) -> float:
    """(1/beta) log(1 + p e^{beta dE})."""
    b = hf.as_beta(beta)
    return float(np.logaddexp(0.0, np.log(p) + b * energy_rise) / b) if p > 0 else 0.0


def baseline_subtracted(p: float, energy_rise, beta):
    """(1/beta) log[(1 + p e^{beta dE}) / (1 + p)]; zero at dE = 0, increasing in dE."""
    b = hf.as_beta(beta)
    de = np.asarray(energy_rise, dtype=float)
    if p <= 0:
        return np.zeros_like(de) if de.ndim else 0.0
    out = (np.logaddexp(0.0, np.log(p) + b * de) - np.log1p(p)) / b
    return out if out.ndim else float(out)


def second_order_remainder_bound(p: float, energy_rise, beta):
    """Lagrange bound on |baseline_subtracted - rho(p) dE| per draw.

    The second derivative of the gain in dE is beta * r (1 - r) with
    r = p e^{beta s} / (1 + p e^{beta s}); its maximum over s between 0 and dE
    times dE^2 / 2 bounds the remainder.
    """
    b = hf.as_beta(beta)
    de = np.atleast_1d(np.asarray(energy_rise, dtype=float))
    if p <= 0:
        return np.zeros_like(de)

    def curv(s):
        r = 1.0 / (1.0 + np.exp(-(np.log(p) + b * s)))
        return r * (1.0 - r)

    lo, hi = np.minimum(de, 0.0), np.maximum(de, 0.0)
    s_half = -np.log(p) / b  # where r = 1/2, the global maximum of r (1 - r)
    peak = np.where((lo <= s_half) & (s_half <= hi), 0.25, np.maximum(curv(lo), curv(hi)))
    return 0.5 * b * peak * de**2


@dataclass(frozen=True)
class GainEstimate:
    gain: float
    stderr: float
    prediction: float
    susceptibility: float
    p: float
    energy_rise: float
    energy_rise_sq: float
    second_order: float  # (beta/2) rho (1 - rho) <dE^2>
    remainder_bound: float  # averaged Lagrange bound on gain - prediction
    draws: np.ndarray = field(repr=False)


def _draw_rises_and_gains(states, X, replay_rows, beta, ens: RotationEnsembleSpec):
    """Shared-draw pass: dE_k(V) and direct raw gains R_{r->k}(V) for every (r, k, V).

    Returns arrays of shape (K, count) and (R, K, count).
    """
    rows = hf.as_rows(X)
    b = hf.as_beta(beta)
    states = np.atleast_2d(states)
    replay_rows = np.atleast_2d(replay_rows)
    K, R = states.shape[0], replay_rows.shape[0]
    e0 = np.array([hf.energy(s, rows, b) for s in states])
    rises = np.zeros((K, ens.count))
    gains = np.zeros((R, K, ens.count))
    if ens.epsilon == 0:
        rot_iter = (np.eye(rows.shape[1]) for _ in range(ens.count))
    else:
        rot_iter = (v.matrix for v in iter_rotations(rows.shape[1], ens))
    sq = 0.5 * np.einsum("kd,kd->k", states, states)
    replay_logits = b * (replay_rows @ states.T)  # (R, K)
    for t, v in enumerate(rot_iter):
        logits = b * ((rows @ v.T) @ states.T)  # (N, K)
        lse = logsumexp(logits, axis=0)
        e_rot = -lse / b + sq
        rises[:, t] = e_rot - e0
        for r in range(R):
            lse_plus = np.logaddexp(lse, replay_logits[r])
            gains[r, :, t] = e_rot - (-lse_plus / b + sq)
    return rises, gains


def _estimate(p: float, rises: np.ndarray, raw: np.ndarray, beta: float) -> GainEstimate:
    b = hf.as_beta(beta)
    via_identity = np.array([exact_identity_gain(p, de, b) for de in rises])
    err = np.max(np.abs(via_identity - raw)) if raw.size else 0.0
    if err > CONSISTENCY_TOL:
        raise InternalConsistencyError(
            f"direct and identity replay gains differ by {err:.3e} > {CONSISTENCY_TOL:g}"
        )
    base = exact_identity_gain(p, 0.0, b)
    draws = raw - base
    gain, se = mean_and_stderr(draws)
    rho = susceptibility(p)
    mean_rise = float(np.mean(rises))
    rise_sq = float(np.mean(rises**2))
    return GainEstimate(
        gain=gain,
        stderr=se,
        prediction=rho * mean_rise,
        susceptibility=rho,
        p=p,
        energy_rise=mean_rise,
        energy_rise_sq=rise_sq,
        second_order=0.5 * b * rho * (1.0 - rho) * rise_sq,
        remainder_bound=float(np.mean(second_order_remainder_bound(p, rises, b))),
        draws=draws,
    )


def averaged_gain(fp: hf.FixedPointResult, X, x_r, beta, ens: RotationEnsembleSpec) -> GainEstimate:
    """Rotation average of R(V) - R(I) with the master-formula prediction on shared draws."""
    if not fp.converged:
        raise ValueError("replay gains need a converged fixed point")
    rows = hf.as_rows(X)
    x_r = _check_pair(fp, rows, x_r)
    b = hf.as_beta(beta)
    rises, gains = _draw_rises_and_gains(fp.state, rows, x_r, b, ens)
    return _estimate(replay_weight(fp.state, rows, x_r, b), rises[0], gains[0, 0], b)


@dataclass(frozen=True)
class ReplayGainTable:
    """Gains Delta_{r->k}: rows are replayed memories, columns are target fixed points."""

    gains: np.ndarray
    predictions: np.ndarray
    stderr: np.ndarray
    susceptibilities: np.ndarray
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    remainder_bounds: np.ndarray | None = None
    second_order: np.ndarray | None = None
    energy_rises: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.gains)):
            raise ValueError("replay gains must be finite")

    def gain(self, r: str, k: str) -> float:
        return float(self.gains[self.row_labels.index(r), self.col_labels.index(k)])

    def ordering(self, factor: float = 5.0, band: float = 3.0) -> dict[str, bool]:
        """Check the canonical hierarchy; ``factor`` stands for a strong gap, ``band`` for same order."""
        oo, cc = self.gain("o", "o"), self.gain("cl1", "cl1")
        c12, co, oc = self.gain("cl1", "cl2"), self.gain("cl1", "o"), self.gain("o", "cl1")
        cross = max(co, oc)
        ratio = co / oc if oc > 0 else np.inf
        checks = {
            "self_outlier_gt_self_cluster": oo > cc,
            "self_cluster_vs_within_cluster": cc >= factor * c12,
            "within_cluster_vs_cross_type": c12 >= factor * cross,
            "cross_types_comparable": 1.0 / band <= ratio <= band,
        }
        return {k: bool(v) for k, v in checks.items()}

    def records(self) -> list[tuple]:
        out = []
        for i, r in enumerate(self.row_labels):
            for j, k in enumerate(self.col_labels):
                out.append((r, k, self.gains[i, j], self.stderr[i, j], self.predictions[i, j],
                            self.susceptibilities[i, j]))
        return out

    def to_csv(self, path):
        header = ["replay", "target", "gain", "stderr", "prediction", "susceptibility"]
        return write_csv(path, header, self.records())

    def to_dict(self) -> dict:
        out = {
            "row_labels": list(self.row_labels),
            "col_labels": list(self.col_labels),
            "gains": self.gains,
            "stderr": self.stderr,
            "predictions": self.predictions,
            "susceptibilities": self.susceptibilities,
        }
        if self.remainder_bounds is not None:
            out["remainder_bounds"] = self.remainder_bounds
        return out

    def to_json(self, path=None):
        return write_json(path, self.to_dict()) if path is not None else json_text(self.to_dict())


def canonical_table(X: MemorySet, beta, ens: RotationEnsembleSpec, tol: float = hf.DEFAULT_TOL) -> ReplayGainTable:
    """Replay {o, cl1} onto fixed points {o, cl1, cl2} on one shared rotation ensemble."""
    cl, out = X.cluster_indices, X.outlier_indices
    if len(cl) < 2 or len(out) < 1:
        raise ValueError("canonical table needs at least two cluster rows and one outlier")
    b = hf.as_beta(beta)
    idx = {"o": int(out[0]), "cl1": int(cl[0]), "cl2": int(cl[1])}
    rows_lab, cols_lab = ("o", "cl1"), ("o", "cl1", "cl2")
    fps = [hf.memory_fixed_point(X, b, idx[k], tol=tol) for k in cols_lab]
    for k, fp in zip(cols_lab, fps):
        if not fp.converged:
            raise ValueError(f"fixed point from {k} did not converge (residual {fp.residual:.3g})")
    states = np.array([fp.state for fp in fps])
    replay_rows = X.vectors[[idx[r] for r in rows_lab]]
    rises, gains = _draw_rises_and_gains(states, X, replay_rows, b, ens)
    shape = (len(rows_lab), len(cols_lab))
    G, P, S, RHO, RB, SO = (np.zeros(shape) for _ in range(6))
    for i in range(len(rows_lab)):
        for j in range(len(cols_lab)):
            p = replay_weight(states[j], X, replay_rows[i], b)
            est = _estimate(p, rises[j], gains[i, j], b)
            G[i, j], P[i, j], S[i, j] = est.gain, est.prediction, est.stderr
            RHO[i, j], RB[i, j], SO[i, j] = est.susceptibility, est.remainder_bound, est.second_order
    return ReplayGainTable(G, P, S, RHO, rows_lab, cols_lab, RB, SO, rises.mean(axis=1))


def buffer_select(X, beta, K: int, policy: str = "high_energy", seed: int | None = None) -> list[int]:
    """Top-K, bottom-K or uniformly random memory indices ranked by E(x_i | X).

    Ties in energy go to the smaller index.
    """
    rows = hf.as_rows(X)
    N = rows.shape[0]
    if not 1 <= K <= N:
        raise ValueError(f"buffer size K={K} must lie in [1, {N}]")
    if policy not in POLICIES:
        raise ValueError(f"unknown buffer policy {policy!r}; expected one of {POLICIES}")
    idx = np.arange(N)
    if policy == "random":
        rng = np.random.default_rng(0 if seed is None else seed)
        return sorted(int(i) for i in rng.choice(N, size=K, replace=False))
    e = stored_energies(rows, beta)
    key = -e if policy == "high_energy" else e
    order = np.lexsort((idx, key))
    return [int(i) for i in order[:K]]


def stored_energies(X, beta) -> np.ndarray:
    """E(x_i | X) for every stored row, on the full set (not leave-one-out)."""
    rows = hf.as_rows(X)
    return np.array([hf.energy(x, rows, beta) for x in rows])
