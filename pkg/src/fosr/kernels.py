"""Covariate kernels, the time kernel, and assembly of the blocked Gram.

The full Gram over all observations is separable: block (i, j) equals
A[i, j] * T_ij, where A[i, j] = L(X_i, X_j) is the covariate kernel and
T_ij holds the time-kernel values between the two subjects' observation
times.  Since T_ij depends on times only, blocks are sliced out of one
kernel matrix over the pooled distinct times; nothing of size
(total observations)^2 is ever built unless a dense oracle asks for it.

When every subject's times sit on one master grid, the full Gram is the
row/column subselection of the Kronecker product A (x) T; ``assemble_kronecker``
takes that route literally and serves as an independent construction of
the same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import pdist

from .dataset import FunctionalDataset
from .errors import DataError, NumericalError

FAMILIES = ("linear", "quadratic", "gaussian")
TIME_KERNELS = ("squared_exponential", "exponential")


@dataclass(frozen=True)
class KernelSpec:
    """Covariate-kernel family plus the time kernel.

    ``bandwidth`` applies to the gaussian family only; None means "resolve
    by the median heuristic when a dataset is available".
    """

    family: str = "gaussian"
    bandwidth: float | None = None
    time_kernel: str = "squared_exponential"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown kernel family {self.family!r}")
        if self.time_kernel not in TIME_KERNELS:
            raise DataError(f"unknown time kernel {self.time_kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise DataError("kernel bandwidth must be positive")


def covariate_kernel(spec: KernelSpec, x1: np.ndarray, x2: np.ndarray) -> float:
    """L(x1, x2) for a single pair of covariate vectors."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise DataError("covariate vectors must have equal dimension")
    dot = float(x1 @ x2)
    if spec.family == "linear":
        return dot
    if spec.family == "quadratic":
        return (1.0 + dot) ** 2
    if spec.bandwidth is None:
        raise DataError("gaussian kernel needs a bandwidth (or a dataset "
                        "to apply the median heuristic)")
    diff = x1 - x2
    return float(np.exp(-(diff @ diff) / spec.bandwidth))


def covariate_gram(spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    """n x n matrix of L over the rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dots = x @ x.T
    if spec.family == "linear":
        return dots
    if spec.family == "quadratic":
        return (1.0 + dots) ** 2
    if spec.bandwidth is None:
        raise DataError("gaussian kernel needs a bandwidth")
    sq = np.diagonal(dots)[:, None] + np.diagonal(dots)[None, :] - 2.0 * dots
    return np.exp(-np.maximum(sq, 0.0) / spec.bandwidth)


def time_kernel_matrix(spec: KernelSpec, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    delta = np.asarray(s, dtype=float)[:, None] - np.asarray(t, dtype=float)[None, :]
    if spec.time_kernel == "squared_exponential":
        return np.exp(-delta**2)
    return np.exp(-np.abs(delta))


def median_heuristic(ds: FunctionalDataset) -> float:
    """Median of squared pairwise covariate distances (gaussian bandwidth)."""
    if ds.n < 2:
        raise DataError("median heuristic needs at least 2 subjects")
    rho = float(np.median(pdist(ds.x_matrix(), "sqeuclidean")))
    if rho == 0.0:
        raise DataError("median heuristic degenerate: all covariate vectors equal")
    return rho


def resolve_bandwidth(spec: KernelSpec, ds: FunctionalDataset) -> KernelSpec:
    """Fill in the gaussian bandwidth by the median heuristic if unset."""
    if spec.family == "gaussian" and spec.bandwidth is None:
        return replace(spec, bandwidth=median_heuristic(ds))
    return spec


@dataclass(frozen=True)
class KernelMatrix:
    """Blocked Gram structure: covariate Gram A plus sliceable time blocks.

    ``pool`` is the time kernel over ``pool_times``; subject i's times map
    to rows/columns of it through ``indices[i]``.  ``kron_order`` is set
    when the matrix was assembled through the Kronecker route, in which
    case the dense view is built as a subselection of A (x) T.
    """

    spec: KernelSpec
    A: np.ndarray
    pool_times: np.ndarray
    pool: np.ndarray
    indices: tuple[np.ndarray, ...]
    kron_route: bool = False

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([ix.size for ix in self.indices])

    def time_block(self, i: int, j: int) -> np.ndarray:
        """T_ij: time-kernel values between subjects i and j."""
        return self.pool[np.ix_(self.indices[i], self.indices[j])]

    def block(self, i: int, j: int) -> np.ndarray:
        """Gram block (i, j) = A_ij * T_ij."""
        return self.A[i, j] * self.time_block(i, j)

    def cross_products(self, vectors: list[np.ndarray]) -> np.ndarray:
        """C[i, j] = v_i' T_ij v_j for per-subject vectors, all pairs at once."""
        v = np.zeros((self.n, self.pool.shape[0]))
        for i, (ix, vec) in enumerate(zip(self.indices, vectors)):
            v[i, ix] = vec
        return v @ self.pool @ v.T

    def dense(self) -> np.ndarray:
        """Materialize the full Gram (oracle use only; quadratic memory)."""
        if self.kron_route:
            m = self.pool.shape[0]
            flat = np.concatenate(
                [i * m + ix for i, ix in enumerate(self.indices)]
            )
            return np.kron(self.A, self.pool)[np.ix_(flat, flat)]
        sizes = self.sizes
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = offsets[-1]
        out = np.empty((total, total))
        for i in range(self.n):
            for j in range(self.n):
                out[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = \
                    self.block(i, j)
        return out


def _check_psd(a: np.ndarray) -> None:
    vals = np.linalg.eigvalsh((a + a.T) / 2.0)
    if vals.size and vals[0] < -1e-8 * max(vals[-1], 0.0):
        raise NumericalError(
            f"covariate Gram not positive semidefinite (min eig {vals[0]:g})"
        )


def assemble(spec: KernelSpec, ds: FunctionalDataset) -> KernelMatrix:
    """Blocked Gram for a dataset, bandwidth resolved if needed."""
    spec = resolve_bandwidth(spec, ds)
    a = covariate_gram(spec, ds.x_matrix())
    _check_psd(a)
    pool_times = np.unique(ds.stacked_times())
    indices = tuple(
        np.searchsorted(pool_times, s.times) for s in ds.subjects
    )
    pool = time_kernel_matrix(spec, pool_times, pool_times)
    return KernelMatrix(spec, a, pool_times, pool, indices)


def assemble_kronecker(spec: KernelSpec, ds: FunctionalDataset,
                       grid: np.ndarray | None = None) -> KernelMatrix:
    """Gram via subselection of the Kronecker product over a master grid.

    Every subject's times must lie on ``grid`` (default: the pooled
    distinct times).  Produces the same Gram as :func:`assemble`; the
    dense view is built from A (x) T literally.
    """
    spec = resolve_bandwidth(spec, ds)
    a = covariate_gram(spec, ds.x_matrix())
    _check_psd(a)
    grid = np.unique(ds.stacked_times()) if grid is None \
        else np.asarray(grid, dtype=float)
    indices = []
    for s in ds.subjects:
        pos = np.searchsorted(grid, s.times)
        ok = (pos < grid.size) & (grid[np.minimum(pos, grid.size - 1)] == s.times)
        if not np.all(ok):
            raise DataError(
                f"subject {s.id!r}: observation time not on the master grid"
            )
        indices.append(pos)
    pool = time_kernel_matrix(spec, grid, grid)
    return KernelMatrix(spec, a, grid, pool, tuple(indices), kron_route=True)
