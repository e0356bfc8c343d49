"""Boltzmann machine of the Hopfield energy (MHN-BM) and its two-task training protocol.

The density is p(xi | X) = exp(-beta E(xi | X)) / Z. Because

    -beta E(xi | X) = logsumexp_i(-beta/2 |xi - x_i|^2 + beta/2 |x_i|^2)

the model is a Gaussian mixture with isotropic variance 1/beta and weights
proportional to exp(beta |x_i|^2 / 2), and

    log Z = logsumexp_i(beta |x_i|^2 / 2) + (d/2) log(2 pi / beta).

For unit-norm rows this is an equal-weight mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp, softmax

from . import hopfield as hf
from .geometry import MemorySet
from .io import write_csv, write_json

UNIT_TOL = 1e-6


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, trace: list[float]):
        super().__init__(f"non-finite mean log-density at step {step}")
        self.step = step
        self.trace = trace


@dataclass(frozen=True)
class BmModel:
    """Trainable memories (N_h x d) at inverse temperature ``beta``."""

    memories: np.ndarray
    beta: float
    unit_norm: bool = True

    def __post_init__(self) -> None:
        m = np.array(self.memories, dtype=float, copy=True)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError(f"memories must be a non-empty 2-d array, got shape {m.shape}")
        hf.as_beta(self.beta)
        if self.unit_norm:
            norms = np.linalg.norm(m, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if bad.size:
                raise ValueError(f"rows {bad.tolist()} are not unit norm (analytic Z needs |x_i| = 1)")
        m.setflags(write=False)
        object.__setattr__(self, "memories", m)

    @property
    def n_hidden(self) -> int:
        return self.memories.shape[0]

    @property
    def dim(self) -> int:
        return self.memories.shape[1]

    def to_dict(self) -> dict:
        return {"beta": self.beta, "N_h": self.n_hidden, "d": self.dim, "rows": self.memories}

    @classmethod
    def from_dict(cls, obj: dict) -> "BmModel":
        rows = np.asarray(obj["rows"], dtype=float)
        if rows.shape != (int(obj["N_h"]), int(obj["d"])):
            raise ValueError("checkpoint shape does not match N_h and d")
        norms = np.linalg.norm(rows, axis=1)
        return cls(rows, float(obj["beta"]), bool(np.all(np.abs(norms - 1) <= UNIT_TOL)))

    def save(self, path):
        return write_json(path, self.to_dict())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 64
    steps: int = 500
    seed: int = 0
    renorm_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.renorm_every < 0:
            raise ValueError("renorm_every must be >= 0 (0 disables projection)")


def _batch(xi) -> np.ndarray:
    b = np.asarray(xi, dtype=float)
    return b[None, :] if b.ndim == 1 else b


def log_partition(model: BmModel) -> float:
    """Exact log Z for any row norms."""
    m, b = model.memories, model.beta
    return float(logsumexp(0.5 * b * np.sum(m**2, axis=1)) + 0.5 * model.dim * np.log(2 * np.pi / b))


def estimate_log_partition(model: BmModel, samples: int = 20000, seed: int = 0) -> tuple[float, float]:
    """Importance-sampling estimate of log Z and its delta-method standard error.

    Proposal: equal-weight mixture of unit-variance Gaussians at the rows.
    """
    rng = np.random.default_rng(seed)
    m, b, d = model.memories, model.beta, model.dim
    comp = rng.integers(0, model.n_hidden, size=samples)
    xs = m[comp] + rng.standard_normal((samples, d))
    sq = np.sum((xs[:, None, :] - m[None, :, :]) ** 2, axis=2)
    log_q = logsumexp(-0.5 * sq, axis=1) - np.log(model.n_hidden) - 0.5 * d * np.log(2 * np.pi)
    log_w = -b * energies(xs, model) - log_q
    est = float(logsumexp(log_w) - np.log(samples))
    w = np.exp(log_w - log_w.max())
    rel_se = float(w.std(ddof=1) / (np.sqrt(samples) * w.mean()))
    return est, rel_se


def energies(xi, model: BmModel) -> np.ndarray:
    """Hopfield energy E(xi | X; beta) for each row of ``xi``."""
    x = _batch(xi)
    b = model.beta
    return -logsumexp(b * (x @ model.memories.T), axis=1) / b + 0.5 * np.sum(x**2, axis=1)


def log_density(xi, model: BmModel, form: str = "mixture"):
    """log p(xi | X).

    ``form="mixture"``: equal-weight Gaussian mixture (unit-norm rows only).
    ``form="boltzmann"``: -beta E - log Z, valid for any row norms.
    """
    x = _batch(xi)
    b, d = model.beta, model.dim
    if form == "mixture":
        if not model.unit_norm:
            raise ValueError("the equal-weight mixture form needs unit-norm rows; use form='boltzmann'")
        sq = np.sum((x[:, None, :] - model.memories[None, :, :]) ** 2, axis=2)
        out = logsumexp(-0.5 * b * sq, axis=1) - np.log(model.n_hidden) - 0.5 * d * np.log(2 * np.pi / b)
    elif form == "boltzmann":
        out = -b * energies(x, model) - log_partition(model)
    else:
        raise ValueError(f"unknown form {form!r}")
    return out if np.ndim(xi) == 2 else float(out[0])


def log_likelihood(batch, model: BmModel) -> float:
    form = "mixture" if model.unit_norm else "boltzmann"
    return float(np.mean(log_density(_batch(batch), model, form)))


def responsibilities(batch, model: BmModel) -> np.ndarray:
    """Posterior component weights, shape (B, N_h)."""
    x = _batch(batch)
    b = model.beta
    if model.unit_norm:
        sq = np.sum((x[:, None, :] - model.memories[None, :, :]) ** 2, axis=2)
        return softmax(-0.5 * b * sq, axis=1)
    return softmax(b * (x @ model.memories.T), axis=1)


def log_likelihood_grad(batch, model: BmModel) -> np.ndarray:
    """Gradient of the mean log-density with respect to the memories.

    Unit-norm rows: (beta/B) sum_xi w_i(xi) (xi - x_i); the constant Z drops out
    and the norm constraint is handled by projection. Free rows: the gradient of
    -beta E - log Z, including the partition term.
    """
    x = _batch(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    b = model.beta
    w = responsibilities(x, model)
    B = x.shape[0]
    if model.unit_norm:
        return b * (w.T @ x - w.sum(axis=0)[:, None] * model.memories) / B
    pz = softmax(0.5 * b * np.sum(model.memories**2, axis=1))
    return b * (w.T @ x) / B - b * pz[:, None] * model.memories


def project_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: rows drawn from the data with D^2 weighting."""
    data = np.asarray(data, dtype=float)
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min(np.sum((data[:, None, :] - np.array(centers)[None]) ** 2, axis=2), axis=1)
        tot = d2.sum()
        idx = rng.integers(len(data)) if tot <= 0 else rng.choice(len(data), p=d2 / tot)
        centers.append(data[idx])
    return np.array(centers)


def init_model(data, n_hidden: int, beta: float, seed: int, jitter: float = 0.1,
               unit_norm: bool = True) -> BmModel:
    """k-means++ rows from the data plus isotropic jitter of std ``jitter / sqrt(d)``."""
    data = _batch(data)
    rng = np.random.default_rng(seed)
    rows = kmeans_pp_init(data, n_hidden, rng)
    rows = rows + jitter / np.sqrt(data.shape[1]) * rng.standard_normal(rows.shape)
    if unit_norm:
        rows = project_rows(rows)
    return BmModel(rows, beta, unit_norm)


@dataclass
class _Adam:
    lr: float
    b1: float
    b2: float
    eps: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def ascend(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return params + self.lr * mh / (np.sqrt(vh) + self.eps)


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(key),)))


@dataclass(frozen=True)
class TrainResult:
    model: BmModel
    trace: np.ndarray  # mean log-density of each step's batch, before the update

    def trace_records(self):
        return [(i, v) for i, v in enumerate(self.trace)]

    def save_trace(self, path):
        return write_csv(path, ["step", "mean_log_density"], self.trace_records())


def train(data, model: BmModel, cfg: TrainConfig, extra=None, stream_key: int = 1) -> TrainResult:
    """Mini-batch maximum likelihood with Adam.

    Batches draw ``batch_size`` rows of ``data`` uniformly with replacement from
    the stream (cfg.seed, stream_key). If ``extra`` rows are given (a replay
    buffer) each batch additionally carries ``ceil(batch_size * len(extra) / len(data))``
    of them, drawn from an independent stream, so the ``data`` indices match a
    run without ``extra`` exactly.
    """
    data = _batch(data)
    if data.shape[0] == 0:
        raise ValueError("training data is empty")
    if data.shape[1] != model.dim:
        raise ValueError(f"data dimension {data.shape[1]} != model dimension {model.dim}")
    rng = _stream(cfg.seed, stream_key)
    extra = None if extra is None or len(extra) == 0 else _batch(extra)
    n_extra = 0
    if extra is not None:
        n_extra = int(np.ceil(cfg.batch_size * extra.shape[0] / data.shape[0]))
        rng_extra = _stream(cfg.seed, stream_key + 1000)
    params = np.array(model.memories, copy=True)
    opt = _Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
                np.zeros_like(params), np.zeros_like(params))
    trace = []
    cur = model
    for step in range(cfg.steps):
        batch = data[rng.integers(0, data.shape[0], size=cfg.batch_size)]
        if n_extra:
            batch = np.vstack([batch, extra[rng_extra.integers(0, extra.shape[0], size=n_extra)]])
        ll = log_likelihood(batch, cur)
        trace.append(ll)
        if not np.isfinite(ll):
            raise TrainingDivergedError(step, trace)
        params = opt.ascend(params, log_likelihood_grad(batch, cur))
        if model.unit_norm and cfg.renorm_every and (step + 1) % cfg.renorm_every == 0:
            params = project_rows(params)
        if not np.all(np.isfinite(params)):
            raise TrainingDivergedError(step, trace)
        # between projections the model is evaluated on projected rows so analytic Z stays valid
        cur = BmModel(project_rows(params) if model.unit_norm else params, model.beta, model.unit_norm)
    return TrainResult(cur, np.array(trace))


@dataclass(frozen=True)
class BmModelConfig:
    """n_hidden = None means one row per task-1 pattern."""

    beta: float = 16.0
    n_hidden: int | None = None
    data_scale: float = 1.0
    init_jitter: float = 0.1


@dataclass(frozen=True)
class ContinualReport:
    pattern_index: np.ndarray
    roles: tuple[str, ...]
    energy_task1: np.ndarray
    energy_task2: np.ndarray
    rise: np.ndarray
    gain_vs_baseline: np.ndarray  # NaN without a buffer
    fixed_points: np.ndarray = field(repr=False)
    fixed_point_converged: np.ndarray = field(repr=False)
    model_task1: BmModel | None = field(default=None, repr=False)
    model_task2: BmModel | None = field(default=None, repr=False)
    trace_task1: np.ndarray | None = field(default=None, repr=False)
    trace_task2: np.ndarray | None = field(default=None, repr=False)
    buffer: tuple[int, ...] = ()

    def records(self):
        return [
            (int(i), r, e1, e2, dr, g)
            for i, r, e1, e2, dr, g in zip(
                self.pattern_index, self.roles, self.energy_task1, self.energy_task2,
                self.rise, self.gain_vs_baseline,
            )
        ]

    def to_csv(self, path):
        header = ["pattern_index", "role", "energy_task1", "energy_task2", "rise", "gain_vs_baseline"]
        return write_csv(path, header, self.records())

    def role_rises(self, role: str) -> np.ndarray:
        return self.rise[[i for i, r in enumerate(self.roles) if r == role]]


def _fixed_points(patterns: np.ndarray, model: BmModel, tol: float, max_iter: int):
    fps = [hf.find_fixed_point(p, model.memories, model.beta, tol=tol, max_iter=max_iter) for p in patterns]
    return np.array([f.state for f in fps]), np.array([f.converged for f in fps])


def continual_run(
    task1,
    task2,
    model_cfg: BmModelConfig,
    cfg: TrainConfig,
    buffer=None,
    task2_steps: int | None = None,
    fp_tol: float = 1e-12,
    fp_max_iter: int = 10_000,
    baseline: ContinualReport | None = None,
) -> ContinualReport:
    """Train on task 1, then task 2 (optionally with replay rows), and compare energies.

    Energies are evaluated at the task-1 fixed points reached from each task-1
    pattern under the task-1 model. With a buffer, ``gain_vs_baseline`` is the
    no-buffer rise minus the with-buffer rise; the no-buffer run reuses the same
    seeds and so the same task-2 batches.
    """
    X1 = task1 if isinstance(task1, MemorySet) else None
    d1 = np.asarray(X1.vectors if X1 else task1, dtype=float) * model_cfg.data_scale
    d2 = np.asarray(task2.vectors if isinstance(task2, MemorySet) else task2, dtype=float) * model_cfg.data_scale
    if d1.shape[1] != d2.shape[1]:
        raise ValueError(f"task dimensions differ: {d1.shape[1]} vs {d2.shape[1]}")
    roles = X1.roles if X1 else ("untagged",) * d1.shape[0]
    unit = model_cfg.data_scale == 1.0
    n_h = model_cfg.n_hidden or d1.shape[0]
    init = init_model(d1, n_h, model_cfg.beta, int(_stream(cfg.seed, 0).integers(2**63)),
                      model_cfg.init_jitter, unit)
    r1 = train(d1, init, cfg, stream_key=1)
    cfg2 = cfg if task2_steps is None else replace(cfg, steps=task2_steps)
    buf_idx = tuple(int(i) for i in buffer) if buffer is not None else ()
    extra = d1[list(buf_idx)] if buf_idx else None
    r2 = train(d2, r1.model, cfg2, extra=extra, stream_key=2)
    fps, conv = _fixed_points(d1, r1.model, fp_tol, fp_max_iter)
    e1 = energies(fps, r1.model)
    e2 = energies(fps, r2.model)
    rise = e2 - e1
    gain = np.full(len(rise), np.nan)
    if buf_idx:
        if baseline is None:
            baseline = continual_run(task1, task2, model_cfg, cfg, None, task2_steps, fp_tol, fp_max_iter)
        gain = baseline.rise - rise
    return ContinualReport(
        np.arange(d1.shape[0]), tuple(roles), e1, e2, rise, gain, fps, conv,
        r1.model, r2.model, r1.trace, r2.trace, buf_idx,
    )
