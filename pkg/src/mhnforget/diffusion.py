"""Exact-score diffusion over a finite memory set.

With data equal to the stored memories, the noisy marginal at step t is the
Gaussian mixture sum_i N(theta_t y_i, tau_t^2 I) / N. Its score is the
Hopfield update direction at beta = tau_t^{-2}, so the drift vanishes exactly
at Hopfield fixed points (variance exploding, unit-norm memories).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from . import hopfield as hf
from .io import write_csv
from .replay import buffer_select

VE = "variance_exploding"
VP = "variance_preserving"
MODES = ("stochastic", "drift_only")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise scale ``taus[t]`` and shrinkage ``thetas[t]`` on the grid t = 0..steps."""

    kind: str
    taus: np.ndarray
    thetas: np.ndarray

    def __post_init__(self) -> None:
        taus = np.array(self.taus, dtype=float)
        thetas = np.array(self.thetas, dtype=float)
        if self.kind not in (VE, VP):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if taus.ndim != 1 or taus.shape != thetas.shape or taus.size < 2:
            raise ValueError("taus and thetas must be 1-d arrays of equal length >= 2")
        if taus[0] < 0 or np.any(np.diff(taus) <= 0):
            raise ValueError("tau must start non-negative and increase strictly")
        if self.kind == VE and np.any(thetas != 1.0):
            raise ValueError("variance-exploding schedules have theta = 1")
        if self.kind == VP and (thetas[0] != 1.0 or np.any(np.diff(thetas) >= 0)):
            raise ValueError("variance-preserving theta must start at 1 and decrease")
        for a in (taus, thetas):
            a.setflags(write=False)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "thetas", thetas)

    @property
    def steps(self) -> int:
        return self.taus.size - 1

    def matched_beta(self, t: int) -> float:
        """beta_t = tau_t^{-2}."""
        tau = self.taus[self._index(t)]
        if tau <= 0:
            raise ValueError(f"tau is zero at t={t}: no finite matched beta")
        return float(tau**-2)

    def _index(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.steps:
            raise ValueError(f"time index {t} outside [0, {self.steps}]")
        return t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "taus": self.taus, "thetas": self.thetas}


def ve_schedule(steps: int = 50, tau_min: float = 1e-3, tau_max: float = 1.0) -> DiffusionSchedule:
    """tau_0 = 0 followed by a geometric grid from tau_min to tau_max."""
    if steps < 1 or not 0 < tau_min < tau_max:
        raise ValueError("need steps >= 1 and 0 < tau_min < tau_max")
    taus = np.concatenate([[0.0], np.geomspace(tau_min, tau_max, steps)])
    return DiffusionSchedule(VE, taus, np.ones_like(taus))


def vp_schedule(steps: int = 50, b_min: float = 0.1, b_max: float = 20.0) -> DiffusionSchedule:
    """Linear rate b(s) on s in [0, 1]; theta = exp(-int b / 2), tau = sqrt(1 - theta^2)."""
    if steps < 1 or not 0 < b_min <= b_max:
        raise ValueError("need steps >= 1 and 0 < b_min <= b_max")
    s = np.linspace(0.0, 1.0, steps + 1)
    integral = b_min * s + 0.5 * (b_max - b_min) * s**2
    thetas = np.exp(-0.5 * integral)
    taus = np.sqrt(-np.expm1(-integral))
    return DiffusionSchedule(VP, taus, thetas)


def _means(X, sched: DiffusionSchedule, t: int) -> tuple[np.ndarray, float]:
    t = sched._index(t)
    tau = sched.taus[t]
    if tau <= 0:
        raise ValueError(f"tau is zero at t={t}: the score of the data distribution is undefined")
    return sched.thetas[t] * hf.as_rows(X), float(tau)


def posterior_weights(x, X, sched: DiffusionSchedule, t: int) -> np.ndarray:
    m, tau = _means(X, sched, t)
    x = np.asarray(x, dtype=float)
    return softmax(-0.5 * np.sum((x - m) ** 2, axis=1) / tau**2)


def exact_score(x, X, sched: DiffusionSchedule, t: int) -> np.ndarray:
    """grad log p_t(x) = (sum_i w_i m_i - x) / tau_t^2."""
    m, tau = _means(X, sched, t)
    x = np.asarray(x, dtype=float)
    w = softmax(-0.5 * np.sum((x - m) ** 2, axis=1) / tau**2)
    return (w @ m - x) / tau**2


def log_marginal(x, X, sched: DiffusionSchedule, t: int) -> float:
    m, tau = _means(X, sched, t)
    x = np.asarray(x, dtype=float)
    d = m.shape[1]
    return float(
        logsumexp(-0.5 * np.sum((x - m) ** 2, axis=1) / tau**2)
        - np.log(m.shape[0])
        - 0.5 * d * np.log(2 * np.pi * tau**2)
    )


def forward_corrupt(x, sched: DiffusionSchedule, t: int, noise: np.ndarray) -> np.ndarray:
    t = sched._index(t)
    return sched.thetas[t] * np.asarray(x, dtype=float) + sched.taus[t] * noise


class IntegrationError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state during reverse integration at step {step}")
        self.step = step


def reverse_sample(
    x_start,
    X,
    sched: DiffusionSchedule,
    mode: str = "stochastic",
    seed=0,
    t_start: int | None = None,
    return_trajectory: bool = False,
):
    """Euler(-Maruyama) integration of the reverse dynamics from ``t_start`` down to 0.

    VE step k -> k-1: x += (tau_k^2 - tau_{k-1}^2) score_k(x) (+ sqrt of that times z).
    VP step: with b = 2 log(theta_{k-1} / theta_k), x += b (x / 2 + score_k(x)) (+ sqrt(b) z).
    The final step into t = 0 adds no noise. ``seed`` may be an int or a Generator.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rows = hf.as_rows(X)
    t0 = sched.steps if t_start is None else sched._index(t_start)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.array(x_start, dtype=float, copy=True)
    traj = [x.copy()] if return_trajectory else None
    for k in range(t0, 0, -1):
        score = exact_score(x, rows, sched, k)
        if sched.kind == VE:
            var = sched.taus[k] ** 2 - sched.taus[k - 1] ** 2
            x = x + var * score
        else:
            var = 2.0 * np.log(sched.thetas[k - 1] / sched.thetas[k])
            x = x + var * (0.5 * x + score)
        if mode == "stochastic" and k > 1:
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(k)
        if traj is not None:
            traj.append(x.copy())
    return np.array(traj) if traj is not None else x


def sample_stream(seed: int, sample: int, generation: int) -> np.random.Generator:
    """Independent stream for one (sample, generation) pair."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(sample), int(generation))))


def reconstruct(
    x,
    X,
    sched: DiffusionSchedule,
    t_star: int,
    generations: int = 1,
    seed: int = 0,
    mode: str = "stochastic",
    sample_key: int = 0,
) -> float:
    """Mean over generations of |x - x_hat|^2 after corrupting to t_star and reversing under X."""
    t_star = sched._index(t_star)
    if generations < 1:
        raise ValueError("generations must be >= 1")
    if t_star == 0:
        return 0.0
    x = np.asarray(x, dtype=float)
    errs = []
    for g in range(generations):
        rng = sample_stream(seed, sample_key, g)
        xt = forward_corrupt(x, sched, t_star, rng.standard_normal(x.shape))
        xh = reverse_sample(xt, X, sched, mode, rng, t_start=t_star)
        errs.append(float(np.sum((x - xh) ** 2)))
    return float(np.mean(errs))


def spearman(a, b) -> float:
    """Rank transform with average ranks for ties, then the product-moment correlation."""
    ra, rb = rankdata(a), rankdata(b)
    if np.std(ra) == 0 or np.std(rb) == 0:
        return 0.0
    return float(np.corrcoef(ra, rb)[0, 1])


def permutation_pvalue(a, b, n_perm: int = 2000, seed: int = 0, alternative: str = "greater") -> float:
    """(1 + #{permuted statistic at least as extreme}) / (1 + n_perm)."""
    obs = spearman(a, b)
    rng = np.random.default_rng(seed)
    ra, rb = rankdata(a), rankdata(b)
    ra = (ra - ra.mean()) / (ra.std() or 1.0)
    rb = (rb - rb.mean()) / (rb.std() or 1.0)
    perms = np.array([ra @ rb[rng.permutation(rb.size)] / rb.size for _ in range(n_perm)])
    if alternative == "greater":
        hits = np.sum(perms >= obs - 1e-12)
    elif alternative == "two-sided":
        hits = np.sum(np.abs(perms) >= abs(obs) - 1e-12)
    else:
        raise ValueError("alternative must be 'greater' or 'two-sided'")
    return float((1 + hits) / (1 + n_perm))


@dataclass(frozen=True)
class ReconstructionReport:
    energy: np.ndarray
    recon_error: np.ndarray
    roles: tuple[str, ...]
    t_star: int
    beta: float
    generations: int
    correlation: float
    p_value: float
    sharpness: np.ndarray | None = field(default=None, repr=False)
    sharpness_correlation: float | None = None

    def __post_init__(self) -> None:
        if np.any(self.recon_error < 0):
            raise ValueError("reconstruction errors must be non-negative")

    def records(self):
        return [(i, r, e, f) for i, (r, e, f) in enumerate(zip(self.roles, self.energy, self.recon_error))]

    def to_csv(self, path):
        return write_csv(path, ["sample_index", "role", "energy", "recon_mse"], self.records())


def _roles(X, n: int) -> tuple[str, ...]:
    return tuple(X.roles) if hasattr(X, "roles") else ("untagged",) * n


def recon_errors(X_old, X_model, sched, t_star, generations, seed, mode) -> np.ndarray:
    rows = hf.as_rows(X_old)
    model = hf.as_rows(X_model)
    return np.array([
        reconstruct(x, model, sched, t_star, generations, seed, mode, sample_key=i)
        for i, x in enumerate(rows)
    ])


def forgetting_vs_energy(
    X_old,
    X_new,
    sched: DiffusionSchedule,
    t_star: int,
    generations: int = 1,
    seed: int = 0,
    mode: str = "stochastic",
    beta: float | None = None,
    n_perm: int = 2000,
    with_sharpness: bool = False,
) -> ReconstructionReport:
    """Task-1 energy at matched beta against reconstruction error under the Task-2 set."""
    old, new = hf.as_rows(X_old), hf.as_rows(X_new)
    if old.shape[1] != new.shape[1]:
        raise ValueError(f"dimension mismatch: {old.shape[1]} vs {new.shape[1]}")
    b = sched.matched_beta(t_star) if beta is None else hf.as_beta(beta)
    energy = np.array([hf.energy(x, old, b) for x in old])
    err = recon_errors(old, new, sched, t_star, generations, seed, mode)
    rho = spearman(energy, err)
    p = permutation_pvalue(energy, err, n_perm, seed)
    sharp, sharp_rho = None, None
    if with_sharpness:
        sharp = np.array([hf.perturbation_sharpness(x, old, b, seed=seed + i) for i, x in enumerate(old)])
        sharp_rho = spearman(sharp, err)
    return ReconstructionReport(energy, err, _roles(X_old, len(old)), int(t_star), float(b),
                                generations, rho, p, sharp, sharp_rho)


def equal_count_bins(values, n_bins: int) -> np.ndarray:
    """Bin label per value; bins hold equal counts (to within one) in ascending order."""
    values = np.asarray(values, dtype=float)
    if not 1 <= n_bins <= values.size:
        raise ValueError(f"n_bins must lie in [1, {values.size}]")
    order = np.lexsort((np.arange(values.size), values))
    labels = np.empty(values.size, dtype=int)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        labels[chunk] = b
    return labels


@dataclass(frozen=True)
class ReplaySweepReport:
    energy: np.ndarray
    baseline_error: np.ndarray
    buffer_error: np.ndarray
    bins: np.ndarray
    buffer: tuple[int, ...]
    policy: str
    roles: tuple[str, ...]

    @property
    def reduction(self) -> np.ndarray:
        return self.baseline_error - self.buffer_error

    def bin_mean(self) -> np.ndarray:
        return np.array([self.reduction[self.bins == b].mean() for b in range(self.bins.max() + 1)])

    def bin_sum(self) -> np.ndarray:
        return np.array([self.reduction[self.bins == b].sum() for b in range(self.bins.max() + 1)])

    def records(self):
        mean, tot = self.bin_mean(), self.bin_sum()
        return [
            (i, r, e, f, int(b), mean[b], tot[b])
            for i, (r, e, f, b) in enumerate(zip(self.roles, self.energy, self.buffer_error, self.bins))
        ]

    def to_csv(self, path):
        header = ["sample_index", "role", "energy", "recon_mse", "bin", "reduction_mean", "reduction_sum"]
        return write_csv(path, header, self.records())


def replay_sweep(
    X_old,
    X_new,
    sched: DiffusionSchedule,
    buffer_policy: str,
    K: int,
    t_star: int,
    generations: int = 1,
    seed: int = 0,
    mode: str = "stochastic",
    n_bins: int = 8,
    beta: float | None = None,
    baseline_error: np.ndarray | None = None,
    buffer_seed: int | None = None,
) -> ReplaySweepReport:
    """Reconstruction errors with and without ``K`` Task-1 rows appended to the Task-2 set.

    Both runs share the per-(sample, generation) noise streams, so the reduction
    isolates the buffer's effect.
    """
    old, new = hf.as_rows(X_old), hf.as_rows(X_new)
    if not 1 <= K <= old.shape[0]:
        raise ValueError(f"K={K} must lie in [1, {old.shape[0]}]")
    b = sched.matched_beta(t_star) if beta is None else hf.as_beta(beta)
    energy = np.array([hf.energy(x, old, b) for x in old])
    buf = buffer_select(old, b, K, buffer_policy, seed if buffer_seed is None else buffer_seed)
    if baseline_error is None:
        baseline_error = recon_errors(old, new, sched, t_star, generations, seed, mode)
    augmented = np.vstack([new, old[buf]])
    err = recon_errors(old, augmented, sched, t_star, generations, seed, mode)
    return ReplaySweepReport(energy, np.asarray(baseline_error, dtype=float), err,
                             equal_count_bins(energy, n_bins), tuple(buf), buffer_policy,
                             _roles(X_old, len(old)))
