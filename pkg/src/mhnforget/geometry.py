"""Structured memory sets and the small-rotation task-shift ensemble.

Memories are stored row-wise: ``vectors[i]`` is the i-th unit-norm pattern.
A task shift replaces every row ``x`` by ``V @ x`` with ``V = expm(eps * Omega)``
and ``Omega = (W - W.T) / 2`` for a standard-normal ``W``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

CLUSTER = "cluster"
OUTLIER = "outlier"
UNTAGGED = "untagged"
ROLES = (CLUSTER, OUTLIER, UNTAGGED)

UNIT_NORM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MemorySet:
    """N unit-norm memories in R^d with optional role tags.

    Parameters
    ----------
    vectors : (N, d) array
        Rows are the stored patterns.
    roles : sequence of str, optional
        One of ``"cluster"``, ``"outlier"``, ``"untagged"`` per row.
    cluster_cosine : float, optional
        Nominal pairwise cosine of the cluster rows (metadata only).
    norm_tol : float
        Row norms must equal one within this tolerance.
    """

    vectors: np.ndarray
    roles: tuple[str, ...] = ()
    cluster_cosine: float | None = None
    norm_tol: float = field(default=UNIT_NORM_TOL, repr=False, compare=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"memory matrix must be 2-d, got shape {v.shape}")
        n, d = v.shape
        if n < 1 or d < 2:
            raise ValueError(f"need N >= 1 and d >= 2, got N={n}, d={d}")
        if not np.all(np.isfinite(v)):
            raise ValueError("memory matrix contains non-finite entries")
        norms = np.linalg.norm(v, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > self.norm_tol)
        if bad.size:
            detail = ", ".join(f"{i} (|x|={norms[i]:.6g})" for i in bad[:10])
            raise ValueError(f"rows are not unit norm: {detail}")
        roles = tuple(self.roles) if len(self.roles) else (UNTAGGED,) * n
        if len(roles) != n:
            raise ValueError(f"got {len(roles)} roles for {n} rows")
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}")
        object.__setattr__(self, "vectors", _frozen(v))
        object.__setattr__(self, "roles", roles)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def gram(self) -> np.ndarray:
        return self.vectors @ self.vectors.T

    def indices(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=int)

    @property
    def cluster_indices(self) -> np.ndarray:
        return self.indices(CLUSTER)

    @property
    def outlier_indices(self) -> np.ndarray:
        return self.indices(OUTLIER)

    def cluster_sum(self) -> np.ndarray:
        """s = sum of the cluster rows."""
        return self.vectors[self.cluster_indices].sum(axis=0)

    def cluster_overlap(self) -> float:
        """A = 1 + (N - 1) c, so that x_i . s = A for every cluster row."""
        n = len(self.cluster_indices)
        return 1.0 + (n - 1) * self.measured_cluster_cosine()

    def measured_cluster_cosine(self) -> float:
        """Mean pairwise cosine of the cluster rows (falls back to metadata)."""
        idx = self.cluster_indices
        if len(idx) < 2:
            if self.cluster_cosine is None:
                raise ValueError("need two cluster rows or cluster_cosine metadata")
            return float(self.cluster_cosine)
        g = self.gram()[np.ix_(idx, idx)]
        off = g[~np.eye(len(idx), dtype=bool)]
        return float(off.mean())

    def with_vectors(self, vectors: np.ndarray) -> "MemorySet":
        return MemorySet(vectors, self.roles, self.cluster_cosine, self.norm_tol)

    def subset(self, idx: Sequence[int]) -> "MemorySet":
        idx = list(idx)
        return MemorySet(
            self.vectors[idx], tuple(self.roles[i] for i in idx), self.cluster_cosine, self.norm_tol
        )

    def append(self, other: "MemorySet") -> "MemorySet":
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return MemorySet(
            np.vstack([self.vectors, other.vectors]),
            self.roles + other.roles,
            self.cluster_cosine,
            max(self.norm_tol, other.norm_tol),
        )


@dataclass(frozen=True)
class RotationMatrix:
    """An orthogonal V = expm(eps * Omega) with its generating seed."""

    matrix: np.ndarray
    epsilon: float
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrix", _frozen(self.matrix))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def orthogonality_error(self) -> float:
        v = self.matrix
        return float(np.linalg.norm(v.T @ v - np.eye(self.dim)))


@dataclass(frozen=True)
class RotationEnsembleSpec:
    """Random small-rotation ensemble: ``count`` draws of size ``epsilon``."""

    epsilon: float
    count: int
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("ensemble count must be >= 1")
        if not self.epsilon >= 0 or not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite and non-negative")

    def draw_seed(self, k: int) -> int:
        return draw_seed(self.master_seed, k)

    def scaled(self, factor: float) -> "RotationEnsembleSpec":
        """Same draws (same Omegas), epsilon multiplied by ``factor``."""
        return RotationEnsembleSpec(self.epsilon * factor, self.count, self.master_seed)


def draw_seed(master_seed: int, k: int) -> int:
    """Order-independent 64-bit seed of draw ``k`` in an ensemble."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(k),))
    return int(ss.generate_state(1, np.uint64)[0])


def build_equal_angular(N: int, d: int, c: float, with_outlier: bool = True) -> MemorySet:
    """Exact equal-angular cluster (pairwise cosine ``c``) plus orthogonal outlier.

    The target Gram matrix is factorized by a symmetric eigendecomposition and the
    resulting rows are embedded in the first rank(G) coordinates of R^d.
    """
    if not 0.0 < c < 1.0:
        raise ValueError(f"cluster cosine must lie in (0, 1), got {c}")
    if N < 1:
        raise ValueError("need at least one cluster memory")
    n = N + (1 if with_outlier else 0)
    if d < max(n, 2):
        raise ValueError(
            f"d={d} is too small: the Gram matrix of {N} cluster rows"
            f"{' plus an outlier' if with_outlier else ''} has rank {n}"
        )
    g = np.zeros((n, n))
    g[:N, :N] = c
    np.fill_diagonal(g, 1.0)
    lam, u = np.linalg.eigh(g)
    keep = lam > 1e-12
    rows = u[:, keep] * np.sqrt(lam[keep])
    vectors = np.zeros((n, d))
    vectors[:, : rows.shape[1]] = rows
    # remove the last ulp of norm drift so rows are unit to rounding
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    roles = (CLUSTER,) * N + ((OUTLIER,) if with_outlier else ())
    return MemorySet(vectors, roles, cluster_cosine=c)


def sample_latent_gaussian(
    N: int, d: int, c: float, seed: int, renormalize: bool = True, with_outlier: bool = False
) -> MemorySet:
    """Cluster rows sqrt(c) mu + sqrt(1 - c) z_i with z_i orthogonal to mu.

    Residuals have unit expected squared norm so rows are unit norm up to
    O(d^{-1/2}) fluctuations; ``renormalize`` rescales them exactly. The optional
    outlier is a random unit vector orthogonal to mu and to the cluster span.
    """
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"c must lie in [0, 1], got {c}")
    if d < 10 * N:
        warnings.warn(f"d={d} < 10 N: cosines will not concentrate near c", stacklevel=2)
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(d)
    mu /= np.linalg.norm(mu)
    z = rng.standard_normal((N, d))
    z -= np.outer(z @ mu, mu)
    z /= np.sqrt(d - 1)
    x = np.sqrt(c) * mu + np.sqrt(1.0 - c) * z
    if renormalize:
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    roles = [CLUSTER] * N
    if with_outlier:
        o = rng.standard_normal(d)
        q, _ = np.linalg.qr(np.vstack([mu, x]).T)
        o -= q @ (q.T @ o)
        x = np.vstack([x, o / np.linalg.norm(o)])
        roles.append(OUTLIER)
    tol = UNIT_NORM_TOL if renormalize else np.inf
    return MemorySet(x, tuple(roles), cluster_cosine=c, norm_tol=tol)


def skew_generator(d: int, rng: np.random.Generator) -> np.ndarray:
    """Omega = (W - W^T) / 2 with W_ij iid standard normal."""
    w = rng.standard_normal((d, d))
    return 0.5 * (w - w.T)


def sample_rotation(d: int, epsilon: float, seed: int) -> RotationMatrix:
    if d < 2:
        raise ValueError("rotations need d >= 2")
    if not epsilon >= 0:
        raise ValueError("epsilon must be non-negative")
    omega = skew_generator(d, np.random.default_rng(seed))
    if epsilon == 0:
        v = np.eye(d)
    else:
        v = expm(epsilon * omega)
    return RotationMatrix(v, float(epsilon), int(seed))


def iter_rotations(d: int, ens: RotationEnsembleSpec) -> Iterator[RotationMatrix]:
    """Yield the ensemble's rotations in draw-index order."""
    for k in range(ens.count):
        yield sample_rotation(d, ens.epsilon, ens.draw_seed(k))


def ensemble_omegas(d: int, ens: RotationEnsembleSpec) -> Iterator[np.ndarray]:
    for k in range(ens.count):
        yield skew_generator(d, np.random.default_rng(ens.draw_seed(k)))


def rotate_memories(X: MemorySet, V: RotationMatrix | np.ndarray) -> MemorySet:
    v = V.matrix if isinstance(V, RotationMatrix) else np.asarray(V, dtype=float)
    if v.shape != (X.dim, X.dim):
        raise ValueError(f"rotation of shape {v.shape} does not act on R^{X.dim}")
    return X.with_vectors(X.vectors @ v.T)


def build_multi_cluster(
    cosines: Sequence[float],
    cluster_size: int,
    n_outliers: int,
    d: int,
    seed: int,
) -> tuple[MemorySet, np.ndarray]:
    """Several latent-Gaussian clusters with their own cosines plus isolated outliers.

    Centroids and outliers are independent random unit vectors, so cross-cluster
    cosines are O(d^{-1/2}). Returns the memory set and a group label per row
    (cluster number, or -1 for outliers).
    """
    if cluster_size < 1 or n_outliers < 0:
        raise ValueError("need cluster_size >= 1 and n_outliers >= 0")
    ss = np.random.SeedSequence(int(seed))
    seeds = ss.spawn(len(cosines) + 1)
    parts, groups, roles = [], [], []
    for g, (c, s) in enumerate(zip(cosines, seeds)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            block = sample_latent_gaussian(cluster_size, d, c, int(s.generate_state(1)[0]))
        parts.append(block.vectors)
        groups += [g] * cluster_size
        roles += [CLUSTER] * cluster_size
    if n_outliers:
        o = np.random.default_rng(seeds[-1]).standard_normal((n_outliers, d))
        parts.append(o / np.linalg.norm(o, axis=1, keepdims=True))
        groups += [-1] * n_outliers
        roles += [OUTLIER] * n_outliers
    return MemorySet(np.vstack(parts), tuple(roles)), np.array(groups)
