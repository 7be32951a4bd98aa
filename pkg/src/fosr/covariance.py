"""Error-covariance estimation from residual curves, truncated eigenbasis.

The residual process is summarized by a smooth covariance surface plus a
white-noise variance.  Off-diagonal raw products r_i(t_j) r_i(t_k), j != k,
estimate the smooth surface (the diagonal is excluded because it carries
the noise); the j = k products estimate surface-diagonal-plus-noise, and
the gap between the two yields the noise variance.

Two paths share one smoother:

* all subjects on one common time grid: raw products are first aggregated
  into the empirical covariance (every grid cell holds the same number of
  products, so smoothing the aggregate is exactly smoothing the pool);
* irregular times: pooled raw products are smoothed directly onto a
  regular grid.

The surface smoother is a product local-linear fit with Epanechnikov
weights; the bandwidth is the smallest candidate giving every grid cell
at least 5 raw pairs.

Eigendecomposition under trapezoid quadrature weights yields orthonormal
eigenfunctions; components are kept up to the requested proportion of
variance explained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import cho_solve

from .dataset import FunctionalDataset
from .errors import NumericalError

MIN_PAIRS_PER_CELL = 5
# candidate bandwidths as fractions of the time span, ascending
BANDWIDTH_LADDER = (0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5)
SIGMA2_FLOOR_FACTOR = 1e-6
EIG_REL_TOL = 1e-12  # eigenvalues below this fraction of the largest are noise


@dataclass(frozen=True)
class CovarianceModel:
    """Truncated eigen-expansion of the residual covariance.

    eigenfunctions has one row per retained component, evaluated on
    ``grid``; rows are orthonormal under the trapezoid quadrature weights
    of the grid.  ``pve`` is the cumulative variance fraction actually
    achieved by the retained components; ``surface`` is the full smoothed
    (noise-free) covariance surface the expansion was extracted from.
    """

    grid: np.ndarray
    eigenfunctions: np.ndarray  # (n_components, G)
    eigenvalues: np.ndarray  # (n_components,)
    sigma2: float
    pve: float
    surface: np.ndarray  # (G, G)
    sigma2_floor: float

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)

    def evaluate_eigenfunctions(self, times: np.ndarray) -> np.ndarray:
        """Cubic interpolation of each eigenfunction; (len(times), ncomp)."""
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < self.grid[0] or times.max() > self.grid[-1]):
            raise NumericalError("evaluation time outside the covariance grid")
        if self.n_components == 0:
            return np.zeros((times.size, 0))
        cols = [CubicSpline(self.grid, ef)(times) for ef in self.eigenfunctions]
        return np.column_stack(cols)

    def to_jsonable(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "sigma2": self.sigma2,
            "pve": self.pve,
            "n_components": self.n_components,
        }


@dataclass(frozen=True)
class BlockPrecision:
    """Per-subject covariance blocks with their Cholesky factors."""

    blocks: tuple[np.ndarray, ...]  # R_i, each m_i x m_i
    factors: tuple[np.ndarray, ...]  # lower Cholesky of each R_i


def _epanechnikov(u: np.ndarray) -> np.ndarray:
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u**2), 0.0)


def _raw_products(res: FunctionalDataset):
    """Pooled off-diagonal products and diagonal squares of residuals."""
    t1, t2, vals = [], [], []
    td, vd = [], []
    for s in res.subjects:
        r = s.responses
        t = s.times
        m = t.size
        td.append(t)
        vd.append(r * r)
        if m < 2:
            continue
        outer = np.outer(r, r)
        jj, kk = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        off = jj != kk
        t1.append(t[jj[off]])
        t2.append(t[kk[off]])
        vals.append(outer[off])
    off_t1 = np.concatenate(t1) if t1 else np.empty(0)
    off_t2 = np.concatenate(t2) if t2 else np.empty(0)
    off_v = np.concatenate(vals) if vals else np.empty(0)
    return off_t1, off_t2, off_v, np.concatenate(td), np.concatenate(vd)


def _select_bandwidth(t1: np.ndarray, t2: np.ndarray, grid: np.ndarray) -> float:
    """Smallest ladder bandwidth with >= MIN_PAIRS_PER_CELL pairs per cell."""
    span = grid[-1] - grid[0]
    for frac in BANDWIDTH_LADDER:
        h = frac * span
        in1 = np.abs(t1[:, None] - grid[None, :]) <= h  # (P, G)
        in2 = np.abs(t2[:, None] - grid[None, :]) <= h
        counts = in1.astype(float).T @ in2.astype(float)
        if counts.min() >= MIN_PAIRS_PER_CELL:
            return h
    raise NumericalError(
        "covariance grid uncovered by data: no candidate bandwidth gives "
        f"every grid cell {MIN_PAIRS_PER_CELL} raw pairs"
    )


def _smooth_surface(t1, t2, values, grid, h) -> np.ndarray:
    """Product local-linear smoother of scattered pairs onto grid x grid.

    Offsets are normalized by the bandwidth, so the local moment matrices
    are well scaled; near-singular cells fall back to the local mean.
    """
    g = grid.size
    u2 = (t2[:, None] - grid[None, :]) / h  # (P, G)
    k2 = _epanechnikov(u2)
    out = np.empty((g, g))
    for a in range(g):
        u1 = (t1 - grid[a]) / h
        k1 = _epanechnikov(u1)
        active = k1 > 0
        if not np.any(active):
            raise NumericalError("covariance grid uncovered at this bandwidth")
        ka = k1[active]
        ua = u1[active]
        va = values[active]
        kb = k2[active]  # (Pa, G)
        ub = u2[active]
        s00 = ka @ kb
        s10 = (ka * ua) @ kb
        s20 = (ka * ua * ua) @ kb
        s01 = np.einsum("p,pg,pg->g", ka, kb, ub)
        s11 = np.einsum("p,pg,pg->g", ka * ua, kb, ub)
        s02 = np.einsum("p,pg,pg->g", ka, kb, ub * ub)
        t00 = (ka * va) @ kb
        t10 = (ka * ua * va) @ kb
        t01 = np.einsum("p,pg,pg->g", ka * va, kb, ub)
        if np.any(s00 <= 0):
            raise NumericalError("covariance grid uncovered at this bandwidth")
        mom = np.empty((g, 3, 3))
        mom[:, 0, 0] = s00
        mom[:, 0, 1] = mom[:, 1, 0] = s10
        mom[:, 0, 2] = mom[:, 2, 0] = s01
        mom[:, 1, 1] = s20
        mom[:, 1, 2] = mom[:, 2, 1] = s11
        mom[:, 2, 2] = s02
        rhs = np.stack([t00, t10, t01], axis=1)
        det = np.linalg.det(mom)
        good = det > 1e-10 * s00**3
        row = t00 / s00  # local-constant fallback
        if np.any(good):
            sol = np.linalg.solve(mom[good], rhs[good, :, None])[:, 0, 0]
            row[good] = sol
        out[a] = row
    return out


def _smooth_curve(t, values, grid, h) -> np.ndarray:
    """1-d local-linear smoother (used for the variance along the diagonal)."""
    u = (t[:, None] - grid[None, :]) / h  # (P, G)
    k = _epanechnikov(u)
    s00 = k.sum(axis=0)
    if np.any(s00 <= 0):
        raise NumericalError("variance smoother: grid uncovered")
    s10 = (k * u).sum(axis=0)
    s20 = (k * u * u).sum(axis=0)
    t00 = (k * values[:, None]).sum(axis=0)
    t10 = (k * u * values[:, None]).sum(axis=0)
    det = s00 * s20 - s10 * s10
    good = det > 1e-10 * s00**2
    out = t00 / s00
    out[good] = (s20[good] * t00[good] - s10[good] * t10[good]) / det[good]
    return out


def _shared_grid(res: FunctionalDataset) -> np.ndarray | None:
    first = res.subjects[0].times
    for s in res.subjects[1:]:
        if not np.array_equal(s.times, first):
            return None
    return np.asarray(first)


def _eigen_truncate(surface: np.ndarray, grid: np.ndarray,
                    pve_threshold: float):
    weights = np.empty(grid.size)
    if grid.size == 1:
        weights[:] = 1.0
    else:
        gaps = np.diff(grid)
        weights[0] = gaps[0] / 2
        weights[-1] = gaps[-1] / 2
        weights[1:-1] = (gaps[:-1] + gaps[1:]) / 2
    root = np.sqrt(weights)
    sym = (surface + surface.T) / 2.0
    m = root[:, None] * sym * root[None, :]
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    if vals.size == 0 or vals[0] <= 0:
        raise NumericalError("covariance surface has no positive eigenvalues")
    keep = vals > EIG_REL_TOL * vals[0]
    vals = vals[keep]
    vecs = vecs[:, keep]
    cum = np.cumsum(vals) / vals.sum()
    n_comp = int(np.searchsorted(cum, pve_threshold - 1e-12) + 1)
    n_comp = min(n_comp, vals.size)
    funcs = (vecs[:, :n_comp] / root[:, None]).T
    return funcs, vals[:n_comp], float(cum[n_comp - 1])


def estimate_covariance(res: FunctionalDataset, grid_size: int = 51,
                        pve_threshold: float = 0.95,
                        bandwidth: float | None = None) -> CovarianceModel:
    """Estimate the residual covariance structure from residual curves.

    When every subject shares one time grid the empirical covariance is
    used directly (its diagonal replaced by a near-diagonal quadratic
    interpolant); otherwise raw products are smoothed onto a regular grid
    of ``grid_size`` points.  ``bandwidth`` overrides the coverage rule.
    """
    if res.n < 2:
        raise NumericalError("covariance estimation needs at least 2 subjects")
    shared = _shared_grid(res)
    if shared is not None and shared.size >= 3:
        # Aggregate first: one empirical-covariance value per grid cell.
        # Cells share the raw-product count, so smoothing the aggregate is
        # identical to smoothing the pooled products (n-fold cheaper).
        grid = shared
        resid = np.array([s.responses for s in res.subjects])
        emp = resid.T @ resid / res.n
        jj, kk = np.meshgrid(np.arange(grid.size), np.arange(grid.size),
                             indexing="ij")
        off = jj != kk
        t1, t2, vals = grid[jj[off]], grid[kk[off]], emp[off]
        td, vd = grid, np.diagonal(emp)
    else:
        lo, hi = res.time_domain
        grid = np.linspace(lo, hi, grid_size)
        t1, t2, vals, td, vd = _raw_products(res)
        if t1.size == 0:
            raise NumericalError(
                "no off-diagonal residual products: need subjects with m_i >= 2"
            )
    if bandwidth is None:
        bandwidth = _select_bandwidth(t1, t2, grid)
    elif bandwidth <= 0:
        raise NumericalError("covariance bandwidth must be positive")
    raw = _smooth_surface(t1, t2, vals, grid, bandwidth)
    surface = (raw + raw.T) / 2.0
    var_diag = _smooth_curve(td, vd, grid, bandwidth)
    surf_diag = np.diagonal(surface)

    floor = SIGMA2_FLOOR_FACTOR * max(float(var_diag.mean()), 0.0)
    sigma2 = max(float(np.mean(var_diag - surf_diag)), floor)

    funcs, vals, pve = _eigen_truncate(surface, grid, pve_threshold)
    return CovarianceModel(
        grid=np.asarray(grid, dtype=float),
        eigenfunctions=funcs,
        eigenvalues=vals,
        sigma2=sigma2,
        pve=pve,
        surface=surface,
        sigma2_floor=floor,
    )


def subject_blocks(model: CovarianceModel, ds: FunctionalDataset) -> BlockPrecision:
    """Materialize each subject's covariance block and its Cholesky factor.

    Block (j,k) is sum_v lam_v phi_v(t_ij) phi_v(t_ik), plus sigma2 on the
    diagonal (within-subject times are distinct by invariant).
    """
    blocks = []
    factors = []
    lam = model.eigenvalues
    for s in ds.subjects:
        phi = model.evaluate_eigenfunctions(s.times)  # (m_i, ncomp)
        r = (phi * lam) @ phi.T if lam.size else np.zeros((s.m, s.m))
        r = (r + r.T) / 2.0
        r[np.diag_indices_from(r)] += model.sigma2
        try:
            factor = np.linalg.cholesky(r)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"subject {s.id!r}: covariance block not positive definite "
                f"(sigma2 floor {model.sigma2_floor:g} too small): {exc}"
            ) from exc
        blocks.append(r)
        factors.append(factor)
    return BlockPrecision(tuple(blocks), tuple(factors))


def whiten(blocks: BlockPrecision, res: FunctionalDataset) -> list[np.ndarray]:
    """Per-subject solves R_i u_i = r_i via the stored Cholesky factors."""
    if len(blocks.factors) != res.n:
        raise NumericalError("block count does not match dataset")
    out = []
    for factor, s in zip(blocks.factors, res.subjects):
        out.append(cho_solve((factor, True), s.responses))
    return out
