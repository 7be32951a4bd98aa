"""Varying-coefficient nuisance model fit by penalized least squares.

The model for the stacked responses is

    y(i,j) = sum_l  C[i,l] * f_l(t_ij) + noise,

with each smooth f_l expanded in a cubic B-spline basis and penalized by
a second-difference penalty on its coefficients.  One smoothing parameter
per smooth is selected by generalized cross-validation,

    GCV = N * RSS / (N - DoF)^2,

searched coordinate-wise over a shared log-spaced grid (two sweeps).
``N`` is the total observation count.

For the nuisance removal C is the subject Z matrix; the F-baseline reuses
the same machinery with C = [Z | X].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .dataset import FunctionalDataset, ResidualDataset
from .errors import DataError, NumericalError

DEFAULT_BASIS_DIM = 10
DEFAULT_GRID_LOG10 = (-6.0, 6.0, 25)


def default_lambda_grid() -> np.ndarray:
    lo, hi, count = DEFAULT_GRID_LOG10
    return np.logspace(lo, hi, int(count))


@dataclass(frozen=True)
class BasisSpec:
    """Cubic B-spline basis: dimension per smooth and knot placement rule."""

    n_basis: int = DEFAULT_BASIS_DIM
    degree: int = 3
    knot_rule: str = "quantile"  # "quantile" of pooled times, or "uniform"

    def __post_init__(self):
        if self.n_basis < self.degree + 1:
            raise DataError("basis dimension must be at least degree + 1")
        if self.knot_rule not in ("quantile", "uniform"):
            raise DataError(f"unknown knot rule {self.knot_rule!r}")


def make_knots(basis: BasisSpec, pooled_times: np.ndarray,
               domain: tuple[float, float]) -> np.ndarray:
    """Full clamped knot vector for the requested basis dimension."""
    lo, hi = float(domain[0]), float(domain[1])
    n_interior = basis.n_basis - basis.degree - 1
    if n_interior > 0:
        if basis.knot_rule == "quantile":
            probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
            interior = np.quantile(pooled_times, probs)
            # Gridded or tied data can collapse quantiles; fall back to
            # uniform placement, which always yields a valid knot vector.
            if (np.unique(interior).size < n_interior
                    or interior.min() <= lo or interior.max() >= hi):
                interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
        else:
            interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    else:
        interior = np.empty(0)
    reps = basis.degree + 1
    return np.r_[[lo] * reps, interior, [hi] * reps]


def basis_matrix(times: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """Dense N x U matrix of B-spline basis values at ``times``."""
    times = np.asarray(times, dtype=float)
    lo, hi = knots[degree], knots[-degree - 1]
    if times.size and (times.min() < lo or times.max() > hi):
        raise DataError(
            f"observation time outside knot range [{lo}, {hi}]"
        )
    return BSpline.design_matrix(times, knots, degree, extrapolate=False).toarray()


def difference_penalty(n_basis: int) -> np.ndarray:
    """Second-difference penalty D'D on a coefficient vector of length U."""
    if n_basis < 3:
        return np.zeros((n_basis, n_basis))
    d = np.diff(np.eye(n_basis), n=2, axis=0)
    return d.T @ d


@dataclass(frozen=True)
class Design:
    """Stacked design for a set of varying-coefficient smooths.

    ``matrix`` has one column block per smooth; block l of row (i,j) is
    C[i,l] times the basis row at t_ij.  ``penalty`` is the common
    per-block penalty (blocks share the basis, hence the penalty).
    """

    matrix: np.ndarray
    penalty: np.ndarray
    n_blocks: int
    block_size: int
    knots: np.ndarray
    degree: int

    def block_slice(self, l: int) -> slice:
        return slice(l * self.block_size, (l + 1) * self.block_size)

    def embedded_penalty(self, l: int) -> np.ndarray:
        """Full-size penalty matrix that is zero outside block l."""
        k = self.n_blocks * self.block_size
        s = np.zeros((k, k))
        sl = self.block_slice(l)
        s[sl, sl] = self.penalty
        return s

    def penalty_root(self) -> np.ndarray:
        """Low-rank root of the per-block penalty: penalty = root @ root.T."""
        u = self.block_size
        if u < 3:
            return np.zeros((u, 0))
        d = np.diff(np.eye(u), n=2, axis=0)
        return d.T


def design_for_covariates(ds: FunctionalDataset, basis: BasisSpec,
                          covariates: np.ndarray) -> Design:
    """Design with one smooth per column of the subject-level ``covariates``."""
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if covariates.shape[0] != ds.n:
        raise DataError("covariate matrix must have one row per subject")
    knots = make_knots(basis, ds.stacked_times(), ds.time_domain)
    b = basis_matrix(ds.stacked_times(), knots, basis.degree)
    # expand covariate values to observation rows
    row_cov = np.repeat(covariates, ds.sizes, axis=0)
    n_blocks = covariates.shape[1]
    w = np.concatenate(
        [row_cov[:, l : l + 1] * b for l in range(n_blocks)], axis=1
    )
    return Design(w, difference_penalty(basis.n_basis),
                  n_blocks, basis.n_basis, knots, basis.degree)


def build_design(ds: FunctionalDataset, basis: BasisSpec | None = None) -> Design:
    """Design for the nuisance model: one smooth per Z column."""
    return design_for_covariates(ds, basis or BasisSpec(), ds.z_matrix())


@dataclass(frozen=True)
class SmoothFit:
    """A fitted set of penalized smooths.

    theta is laid out one coefficient block per smooth; lambdas holds the
    selected smoothing parameter per smooth.  dof is the hat-matrix trace,
    rss the residual sum of squares of the final fit, gcv the criterion
    value at the selected lambdas.
    """

    theta: np.ndarray  # (n_blocks, block_size)
    lambdas: np.ndarray
    dof: float
    rss: float
    gcv: float
    knots: np.ndarray
    degree: int

    def theta_flat(self) -> np.ndarray:
        return self.theta.reshape(-1)

    def evaluate_smooth(self, l: int, times: np.ndarray) -> np.ndarray:
        """Fitted coefficient function of smooth l at arbitrary times."""
        b = basis_matrix(np.asarray(times, dtype=float), self.knots, self.degree)
        return b @ self.theta[l]


class _GcvState:
    """Shared factorizations for repeated GCV evaluation on one design.

    Everything the lambda search needs is expressible through the k x k
    cross-product matrices, so the N-row design is touched once (or not
    at all when the caller supplies the cross products directly).
    """

    def __init__(self, design: Design, y: np.ndarray | None, *,
                 wtw: np.ndarray | None = None, wty: np.ndarray | None = None,
                 yty: float | None = None, n_total: int | None = None):
        self.design = design
        if y is not None:
            w = design.matrix
            self.n_total = w.shape[0]
            self.wtw = w.T @ w
            self.wty = w.T @ y
            self.yty = float(y @ y)
        else:
            self.n_total = int(n_total)
            self.wtw = wtw
            self.wty = wty
            self.yty = float(yty)
        self.k = self.wtw.shape[0]
        # penalty roots embedded per block, used for the cheap trace identity
        root = design.penalty_root()
        self._roots = np.zeros((self.k, design.n_blocks * root.shape[1]))
        self._rank = root.shape[1]
        for l in range(design.n_blocks):
            self._roots[design.block_slice(l),
                        l * self._rank:(l + 1) * self._rank] = root

    def penalized_matrix(self, lambdas: np.ndarray) -> np.ndarray:
        m = self.wtw.copy()
        for l in range(self.design.n_blocks):
            sl = self.design.block_slice(l)
            m[sl, sl] += lambdas[l] * self.design.penalty
        return m

    def _trace_given_factor(self, lo: np.ndarray, lambdas: np.ndarray) -> float:
        """tr(M^{-1} W'W) = k - sum_l lam_l * ||L^{-1} root_l||_F^2."""
        if self._rank == 0:
            half = solve_triangular(lo, self.wtw, lower=True,
                                    check_finite=False)
            return float(np.trace(solve_triangular(
                lo, half.T, lower=True, check_finite=False).T))
        half = solve_triangular(lo, self._roots, lower=True, check_finite=False)
        norms = (half * half).sum(axis=0).reshape(self.design.n_blocks,
                                                  self._rank).sum(axis=1)
        return float(self.k - lambdas @ norms)

    def profile_coordinate(self, lambdas: np.ndarray, l: int,
                           grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """GCV, DoF and RSS over the grid for block l, others held fixed.

        Writes M(lam) = M_rest + (lam - lam0) F F' with F the low-rank
        penalty root of block l embedded at its columns; the Woodbury
        identity then reduces every grid point to a solve of size
        rank(penalty), batched over the grid.
        """
        lam0 = float(grid.min())
        work = lambdas.copy()
        work[l] = lam0
        m_rest = self.penalized_matrix(work)
        try:
            lo = cholesky(m_rest, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular penalized system: {exc}") from exc

        # theta_rest and the trace at the base point lam = lam0
        tr_base = self._trace_given_factor(lo, work)
        c = solve_triangular(lo, self.wty, lower=True, check_finite=False)
        theta_rest = solve_triangular(lo, c, trans="T", lower=True,
                                      check_finite=False)
        wtw_theta = self.wtw @ theta_rest
        cpc = float(theta_rest @ wtw_theta)
        cc = float(c @ c)
        rss_base = self.yty - 2.0 * cc + cpc

        root = self.design.penalty_root()  # (u, r)
        rank = root.shape[1]
        shift = grid - lam0
        if rank == 0:
            dof = np.full(grid.size, tr_base)
            rss = np.full(grid.size, max(rss_base, 0.0))
            return self._gcv_from(dof, rss), dof, rss

        emb = np.zeros((self.k, rank))
        emb[self.design.block_slice(l)] = root
        f = solve_triangular(lo, emb, lower=True, check_finite=False)  # k x r
        ftf = f.T @ f
        # sandwiches of W'W through M_rest^{-1}
        ht = solve_triangular(lo, f, trans="T", lower=True, check_finite=False)
        wh = self.wtw @ ht
        fpf = ht.T @ wh  # F' P F with P = L^{-1} W'W L^{-T}
        fc = f.T @ c
        fpc = wh.T @ theta_rest  # F' P c = (W'W L^{-T}F)' theta_rest

        dof = np.full(grid.size, tr_base)
        rss = np.full(grid.size, max(rss_base, 0.0))
        pos = shift > 0
        if np.any(pos):
            n_pos = int(pos.sum())
            kmat = ftf[None, :, :] + np.eye(rank)[None, :, :] / shift[pos, None, None]
            rhs = np.concatenate([fc[:, None], fpf], axis=1)  # (r, 1 + r)
            sol = np.linalg.solve(kmat, np.tile(rhs, (n_pos, 1, 1)))
            alpha = sol[:, :, 0]
            kinv_fpf = sol[:, :, 1:]
            dof[pos] = tr_base - np.trace(kinv_fpf, axis1=1, axis2=2)
            u_dot_c = cc - alpha @ fc
            upu = cpc - 2.0 * (alpha @ fpc) + np.einsum(
                "gi,ij,gj->g", alpha, fpf, alpha)
            rss[pos] = np.maximum(self.yty - 2.0 * u_dot_c + upu, 0.0)
        return self._gcv_from(dof, rss), dof, rss

    def _gcv_from(self, dof: np.ndarray, rss: np.ndarray) -> np.ndarray:
        denom = self.n_total - dof
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(denom > 0, self.n_total * rss / denom**2, np.inf)

    def solve(self, lambdas: np.ndarray) -> tuple[np.ndarray, float]:
        """Exact coefficient solve and hat-matrix trace at fixed lambdas."""
        m = self.penalized_matrix(lambdas)
        try:
            factor = cho_factor(m, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular penalized system: {exc}") from exc
        theta = cho_solve(factor, self.wty)
        dof = float(np.trace(cho_solve(factor, self.wtw)))
        return theta, dof


def _check_grid(grid: np.ndarray | None) -> np.ndarray:
    if grid is None:
        grid = default_lambda_grid()
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid < 0):
        raise DataError("lambda grid must be a non-empty 1-d array of values >= 0")
    return np.sort(grid)


def _search_lambdas(state: _GcvState, grid: np.ndarray) -> np.ndarray:
    """Two coordinate-descent sweeps of the GCV criterion over the grid."""
    lambdas = np.ones(state.design.n_blocks)
    for _ in range(2):
        for l in range(state.design.n_blocks):
            gcv, dof, _ = state.profile_coordinate(lambdas, l, grid)
            usable = dof < state.n_total
            if not np.any(usable):
                raise NumericalError(
                    "GCV undefined on the whole grid (DoF >= N_total)"
                )
            gcv = np.where(usable, gcv, np.inf)
            lambdas[l] = grid[int(np.argmin(gcv))]
    return lambdas


def _finish_fit(state: _GcvState, design: Design, lambdas: np.ndarray,
                exact_y: np.ndarray | None = None) -> SmoothFit:
    """Exact solve at the selected lambdas plus the reported criteria.

    With ``exact_y`` the rss comes from the actual residual vector; the
    cross-product path uses the quadratic identity instead (accurate to
    round-off away from interpolation).
    """
    theta_flat, dof = state.solve(lambdas)
    if dof >= state.n_total:
        raise NumericalError("effective degrees of freedom reached N_total")
    if exact_y is not None:
        resid = exact_y - design.matrix @ theta_flat
        rss = float(resid @ resid)
    else:
        rss = max(float(state.yty - 2.0 * (theta_flat @ state.wty)
                        + theta_flat @ state.wtw @ theta_flat), 0.0)
    gcv_value = state.n_total * rss / (state.n_total - dof) ** 2
    return SmoothFit(
        theta=theta_flat.reshape(design.n_blocks, design.block_size),
        lambdas=np.asarray(lambdas, dtype=float),
        dof=dof,
        rss=rss,
        gcv=float(gcv_value),
        knots=design.knots,
        degree=design.degree,
    )


def fit_gcv(design: Design, y: np.ndarray,
            grid: np.ndarray | None = None) -> SmoothFit:
    """Select smoothing parameters by GCV and return the fitted smooths.

    Coordinate-wise search: two sweeps over the smooths, each scanning the
    shared grid with the other lambdas held at their current values.  The
    reported rss/dof/gcv come from an exact solve at the selected lambdas.
    """
    y = np.asarray(y, dtype=float)
    grid = _check_grid(grid)
    state = _GcvState(design, y)
    lambdas = _search_lambdas(state, grid)
    return _finish_fit(state, design, lambdas, exact_y=y)


def fit_gcv_cross(design: Design, wtw: np.ndarray, wty: np.ndarray,
                  yty: float, n_total: int,
                  grid: np.ndarray | None = None) -> SmoothFit:
    """GCV fit from precomputed cross products (design rows never touched).

    Callers that refit under many covariate relabelings use this to avoid
    rebuilding the row matrix; ``design.matrix`` may be empty.
    """
    grid = _check_grid(grid)
    state = _GcvState(design, None, wtw=wtw, wty=wty, yty=yty, n_total=n_total)
    lambdas = _search_lambdas(state, grid)
    return _finish_fit(state, design, lambdas)


def profile_gcv(design: Design, y: np.ndarray, lambdas: np.ndarray, l: int,
                grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(gcv, dof, rss) over ``grid`` for smooth l, other lambdas fixed."""
    grid = np.sort(np.asarray(grid, dtype=float))
    state = _GcvState(design, np.asarray(y, dtype=float))
    return state.profile_coordinate(np.asarray(lambdas, dtype=float), l, grid)


def fit_fixed(design: Design, y: np.ndarray, lambdas: np.ndarray) -> SmoothFit:
    """Fit with the smoothing parameters pinned (no GCV search)."""
    y = np.asarray(y, dtype=float)
    state = _GcvState(design, y)
    return _finish_fit(state, design, np.asarray(lambdas, dtype=float),
                       exact_y=y)


def fit_fixed_cross(design: Design, wtw: np.ndarray, wty: np.ndarray,
                    yty: float, n_total: int, lambdas: np.ndarray) -> SmoothFit:
    """Pinned-lambda fit from precomputed cross products."""
    state = _GcvState(design, None, wtw=wtw, wty=wty, yty=yty, n_total=n_total)
    return _finish_fit(state, design, np.asarray(lambdas, dtype=float))


def residualize(ds: FunctionalDataset, fit: SmoothFit,
                basis: BasisSpec | None = None) -> ResidualDataset:
    """Subtract the fitted nuisance effects from every response.

    Recomputes the same design rows used by the fit, so the stacked result
    equals y - W @ theta exactly.
    """
    design = build_design(ds, basis or BasisSpec(
        n_basis=fit.theta.shape[1], degree=fit.degree))
    if design.n_blocks != fit.theta.shape[0]:
        raise DataError("fit does not match the dataset's nuisance layout")
    if not np.array_equal(design.knots, fit.knots):
        raise DataError("fit was produced from a different dataset (knots differ)")
    resid = ds.stacked_responses() - design.matrix @ fit.theta_flat()
    plain = ds.with_responses(resid)
    return ResidualDataset(plain.subjects, plain.time_domain)
