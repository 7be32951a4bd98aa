"""Linear function-on-scalar comparator with permutation calibration.

The null model carries only the nuisance smooths; the alternative adds
one varying-coefficient smooth per covariate under test, fitted by the
same penalized machinery.  The statistic is the relative drop in residual
sum of squares,

    F = (RSS_null - RSS_alt) / RSS_alt.

Calibration mirrors the score test: covariate rows are permuted across
subjects and the alternative model is refit each time (the null fit does
not involve the covariates, so it is computed once).  ``fast`` pins the
alternative's smoothing parameters at their observed-data values instead
of re-selecting them per permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FunctionalDataset
from .errors import DataError, NumericalError
from .score import p_value_from, permutation_stream
from .smoothing import (
    BasisSpec,
    SmoothFit,
    basis_matrix,
    design_for_covariates,
    fit_fixed_cross,
    fit_gcv,
    fit_gcv_cross,
)


@dataclass(frozen=True)
class FResult:
    f_observed: float
    f_perm: np.ndarray
    p_value: float
    rss0: float
    rss1: float
    manifest: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "f_observed": self.f_observed,
            "p_value": self.p_value,
            "rss0": self.rss0,
            "rss1": self.rss1,
            "f_perm": self.f_perm.tolist(),
            "manifest": self.manifest,
        }


def _alternative_design(ds: FunctionalDataset, basis: BasisSpec,
                        x: np.ndarray) -> Design:
    return design_for_covariates(ds, basis, np.hstack([ds.z_matrix(), x]))


def f_statistic(ds: FunctionalDataset, basis: BasisSpec | None = None,
                grid: np.ndarray | None = None) -> dict:
    """Observed F with the residual sums of squares of both models."""
    basis = basis or BasisSpec()
    y = ds.stacked_responses()
    null_fit = fit_gcv(design_for_covariates(ds, basis, ds.z_matrix()), y, grid)
    alt_fit = fit_gcv(_alternative_design(ds, basis, ds.x_matrix()), y, grid)
    if alt_fit.rss <= 0:
        raise NumericalError("alternative model interpolates (RSS_alt = 0)")
    return {
        "f": (null_fit.rss - alt_fit.rss) / alt_fit.rss,
        "rss0": null_fit.rss,
        "rss1": alt_fit.rss,
        "null_fit": null_fit,
        "alt_fit": alt_fit,
    }


def f_permutation_test(ds: FunctionalDataset, permutations: int, seed: int,
                       basis: BasisSpec | None = None,
                       grid: np.ndarray | None = None,
                       fast: bool = False) -> FResult:
    """Permutation-calibrated F test.

    Each permutation reassigns covariate rows across subjects and refits
    the alternative model.  The basis rows are shared by all refits; only
    the per-subject multipliers change.
    """
    if permutations < 1:
        raise DataError("need at least one permutation")
    basis = basis or BasisSpec()
    y = ds.stacked_responses()
    obs = f_statistic(ds, basis, grid)
    rss0 = obs["rss0"]
    x = ds.x_matrix()
    alt_fit: SmoothFit = obs["alt_fit"]

    # The basis rows never change across permutations, only the per-subject
    # multipliers, so each refit assembles its cross products from cached
    # per-subject basis Grams instead of rebuilding the row matrix.
    alt = _alternative_design(ds, basis, x)
    b_rows = basis_matrix(ds.stacked_times(), alt.knots, alt.degree)
    offsets = ds.offsets()
    n = ds.n
    grams = np.empty((n, alt.block_size, alt.block_size))
    bty = np.empty((n, alt.block_size))
    for i, s in enumerate(ds.subjects):
        bi = b_rows[offsets[i]:offsets[i] + s.m]
        grams[i] = bi.T @ bi
        bty[i] = bi.T @ s.responses
    z = ds.z_matrix()
    yty = float(y @ y)
    n_total = ds.total_observations

    f_perm = np.empty(permutations)
    for b in range(permutations):
        perm = permutation_stream(seed, b).permutation(n)
        c_b = np.hstack([z, x[perm]])
        wtw = np.einsum("il,ik,iuv->lukv", c_b, c_b, grams,
                        optimize=True).reshape(alt.matrix.shape[1], -1)
        wty = np.einsum("il,iu->lu", c_b, bty).reshape(-1)
        if fast:
            fit_b = fit_fixed_cross(alt, wtw, wty, yty, n_total,
                                    alt_fit.lambdas)
        else:
            fit_b = fit_gcv_cross(alt, wtw, wty, yty, n_total, grid)
        if fit_b.rss <= 0:
            raise NumericalError("permuted alternative model interpolates")
        f_perm[b] = (rss0 - fit_b.rss) / fit_b.rss

    return FResult(
        f_observed=obs["f"],
        f_perm=f_perm,
        p_value=p_value_from(obs["f"], f_perm),
        rss0=rss0,
        rss1=obs["rss1"],
        manifest={
            "seed": seed,
            "permutations": permutations,
            "basis_dim": basis.n_basis,
            "fast": fast,
        },
    )
