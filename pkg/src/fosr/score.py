"""Variance-component score statistic and its permutation null.

The statistic is the quadratic form of the whitened residuals through the
Gram structure,

    T = sum_ij A[i, j] * (u_i' T_ij u_j),    u_i = R_i^{-1} r_i,

which is the response-dependent half of the likelihood derivative for the
variance component at zero.  The null distribution comes from relabeling
subjects' covariate vectors: the per-pair scalars C[i, j] = u_i' T_ij u_j
are precomputed once, after which each permutation costs one permuted
read of A against C.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from time import perf_counter

import numpy as np
from scipy.linalg import cho_solve

from ._version import __version__
from .covariance import BlockPrecision, CovarianceModel, estimate_covariance, \
    subject_blocks, whiten
from .dataset import FunctionalDataset, ResidualDataset, validate
from .errors import DataError, StageFailure
from .kernels import KernelMatrix, KernelSpec, assemble
from .smoothing import BasisSpec, SmoothFit, build_design, fit_gcv, residualize


def permutation_stream(seed, b: int) -> np.random.Generator:
    """Independent generator for permutation b; scheduling-order free.

    ``seed`` may be an int or a tuple of ints (study code keys streams by
    (seed, replicate, role)).
    """
    key = [int(seed)] if np.isscalar(seed) else [int(v) for v in seed]
    return np.random.default_rng(key + [int(b)])


@dataclass(frozen=True)
class TestConfig:
    """Everything a test run depends on besides the data."""

    __test__ = False  # bare "Test" prefix, keep pytest from collecting it

    kernel: KernelSpec = KernelSpec()
    permutations: int = 200
    seed: int = 0
    basis: BasisSpec = BasisSpec()
    lambda_grid: np.ndarray | None = None
    pve: float = 0.95
    cov_grid_size: int = 51
    cov_bandwidth: float | None = None


@dataclass(frozen=True)
class TestResult:
    """Observed statistic, permutation replicates, p-value and manifest."""

    __test__ = False  # bare "Test" prefix, keep pytest from collecting it

    t_observed: float
    t_perm: np.ndarray
    p_value: float
    manifest: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "t_observed": self.t_observed,
            "p_value": self.p_value,
            "t_perm": self.t_perm.tolist(),
            "manifest": self.manifest,
        }


def statistic(blocks: BlockPrecision, res: ResidualDataset,
              km: KernelMatrix) -> float:
    """T computed blockwise from whitened residuals."""
    u = whiten(blocks, res)
    c = km.cross_products(u)
    return float(np.sum(km.A * c))


def score_components(blocks: BlockPrecision, res: ResidualDataset,
                     km: KernelMatrix) -> dict:
    """Trace and quadratic terms of the score at a zero variance component.

    The derivative of the log-likelihood there is
    -trace_term / 2 + quadratic_term / 2.
    """
    trace_term = 0.0
    for i, factor in enumerate(blocks.factors):
        t_ii = km.time_block(i, i)
        trace_term += km.A[i, i] * float(np.trace(cho_solve((factor, True), t_ii)))
    return {
        "trace_term": trace_term,
        "quadratic_term": statistic(blocks, res, km),
    }


def p_value_from(t_observed: float, t_perm: np.ndarray) -> float:
    """(# {T_b > T} + 1) / (B + 1); strict inequality, so ties do not reject."""
    b = t_perm.size
    return (int(np.sum(t_perm > t_observed)) + 1) / (b + 1)


def permutation_test(ds: FunctionalDataset, res: ResidualDataset,
                     blocks: BlockPrecision, km: KernelMatrix,
                     permutations: int, seed: int,
                     naive: bool = False) -> TestResult:
    """Permutation null for the score statistic.

    Covariate vectors are relabeled across subjects; responses, times and
    the fitted covariance stay put.  The fast path permutes the covariate
    Gram against precomputed cross-products; ``naive`` reassembles the
    kernel from the permuted dataset each time (oracle path).
    """
    if permutations < 1:
        raise DataError("need at least one permutation")
    u = whiten(blocks, res)
    c = km.cross_products(u)
    t_observed = float(np.sum(km.A * c))
    n = ds.n
    t_perm = np.empty(permutations)
    if naive:
        x = ds.x_matrix()
        for b in range(permutations):
            perm = permutation_stream(seed, b).permutation(n)
            km_b = assemble(km.spec, ds.with_x(x[perm]))
            t_perm[b] = statistic(blocks, res, km_b)
    else:
        for b in range(permutations):
            perm = permutation_stream(seed, b).permutation(n)
            t_perm[b] = np.sum(km.A[np.ix_(perm, perm)] * c)
    return TestResult(
        t_observed=t_observed,
        t_perm=t_perm,
        p_value=p_value_from(t_observed, t_perm),
    )


@dataclass
class PipelineArtifacts:
    """Intermediate products of a full run, exposed for inspection."""

    fit: SmoothFit
    residuals: ResidualDataset
    model: CovarianceModel
    blocks: BlockPrecision
    kernel: KernelMatrix
    timings: dict


def _stage(timings: dict, name: str):
    class _Timer:
        def __enter__(self):
            self.start = perf_counter()

        def __exit__(self, exc_type, exc, tb):
            timings[name] = perf_counter() - self.start
            if exc is not None and not isinstance(exc, StageFailure):
                raise StageFailure(name, exc) from exc
            return False

    return _Timer()


def prepare_pipeline(ds: FunctionalDataset, config: TestConfig) -> PipelineArtifacts:
    """Nuisance removal, covariance fit, whitening structures, kernel."""
    timings: dict = {}
    with _stage(timings, "validate"):
        violations = validate(ds)
        if violations:
            raise DataError("; ".join(violations))
    with _stage(timings, "nuisance_fit"):
        design = build_design(ds, config.basis)
        fit = fit_gcv(design, ds.stacked_responses(), config.lambda_grid)
    with _stage(timings, "residualize"):
        res = residualize(ds, fit, config.basis)
    with _stage(timings, "covariance"):
        model = estimate_covariance(
            res, grid_size=config.cov_grid_size, pve_threshold=config.pve,
            bandwidth=config.cov_bandwidth,
        )
        blocks = subject_blocks(model, res)
    with _stage(timings, "kernel"):
        km = assemble(config.kernel, ds)
    return PipelineArtifacts(fit, res, model, blocks, km, timings)


def run_test(ds: FunctionalDataset, config: TestConfig,
             naive: bool = False, timings: dict | None = None) -> TestResult:
    """Full pipeline: residualize, estimate covariance, permutation test.

    Deterministic given (ds, config): every random draw comes from streams
    keyed by (config.seed, permutation index).  ``timings``, if given, is
    filled with per-stage wall-clock seconds.
    """
    art = prepare_pipeline(ds, config)
    with _stage(art.timings, "permutation"):
        result = permutation_test(
            ds, art.residuals, art.blocks, art.kernel,
            config.permutations, config.seed, naive=naive,
        )
    manifest = {
        "seed": config.seed,
        "permutations": config.permutations,
        "kernel": {
            "family": art.kernel.spec.family,
            "bandwidth": art.kernel.spec.bandwidth,
            "time_kernel": art.kernel.spec.time_kernel,
        },
        "pve": config.pve,
        "cov_grid_size": config.cov_grid_size,
        "basis_dim": config.basis.n_basis,
        "lambda_grid": (None if config.lambda_grid is None
                        else list(np.asarray(config.lambda_grid, dtype=float))),
        "n_components": art.model.n_components,
        "sigma2": art.model.sigma2,
        "version": __version__,
    }
    if timings is not None:
        timings.update(art.timings)
    return TestResult(result.t_observed, result.t_perm, result.p_value, manifest)
