"""Penalized smoother: design construction, GCV selection, residualization."""

import numpy as np
import pytest

from fosr.dataset import FunctionalDataset, SubjectRecord
from fosr.errors import DataError, NumericalError
from fosr.simulate import ScenarioSpec, generate
from fosr.smoothing import (
    BasisSpec,
    SmoothFit,
    basis_matrix,
    build_design,
    default_lambda_grid,
    design_for_covariates,
    difference_penalty,
    fit_fixed,
    fit_gcv,
    fit_gcv_cross,
    make_knots,
    profile_gcv,
    residualize,
)


def toy_dataset(n=6, m=9, q=2, seed=0):
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        t = np.sort(rng.uniform(0, 1, m))
        z = np.r_[1.0, rng.standard_normal(q - 1)]
        y = z @ np.vstack([t, np.sin(2 * np.pi * t)])[: q] \
            + 0.1 * rng.standard_normal(m)
        subjects.append(SubjectRecord(f"s{i}", t, y, rng.standard_normal(2), z))
    return FunctionalDataset(tuple(subjects), (0.0, 1.0))


class TestBuildDesign:
    def test_intercept_only_row_is_basis_row(self):
        ds = FunctionalDataset(
            (SubjectRecord("a", [0.37], [1.0], [0.0], [1.0]),
             SubjectRecord("b", [0.74], [2.0], [0.0], [1.0])),
            (0.0, 1.0),
        )
        basis = BasisSpec(n_basis=4)
        design = build_design(ds, basis)
        assert design.matrix.shape == (2, 4)
        direct = basis_matrix(np.array([0.37]), design.knots, 3)
        assert np.array_equal(design.matrix[0], direct[0])

    def test_zero_covariate_zeroes_block(self):
        ds = FunctionalDataset(
            (SubjectRecord("a", [0.2, 0.5], [1.0, 2.0], [0.0], [1.0, 0.0]),
             SubjectRecord("b", [0.4], [1.5], [0.0], [1.0, 2.0])),
            (0.0, 1.0),
        )
        design = build_design(ds, BasisSpec(n_basis=5))
        block2 = design.matrix[:2, design.block_slice(1)]
        assert np.all(block2 == 0.0)

    def test_partition_of_unity_block_rowsums(self):
        # B-spline bases sum to one, so each block's row sum must equal the
        # subject's covariate value; checked on a 101-point grid
        grid = np.linspace(0.0, 1.0, 101)
        z_second = (0.4, -0.7)
        subjects = tuple(
            SubjectRecord(f"s{k}", grid, np.zeros(101), [0.0],
                          [1.0, z_second[k]])
            for k in range(2)
        )
        ds = FunctionalDataset(subjects, (0.0, 1.0))
        design = build_design(ds, BasisSpec(n_basis=8))
        z = ds.z_matrix()
        for l in range(2):
            sums = design.matrix[:, design.block_slice(l)].sum(axis=1)
            expected = np.repeat(z[:, l], 101)
            assert np.allclose(sums, expected, atol=1e-12)

    def test_time_outside_knot_range(self):
        ds = toy_dataset()
        knots = make_knots(BasisSpec(), ds.stacked_times(), (0.0, 1.0))
        with pytest.raises(DataError, match="outside knot range"):
            basis_matrix(np.array([1.5]), knots, 3)

    def test_quantile_knots_inside_domain(self):
        ds = toy_dataset(n=10, m=20, seed=3)
        knots = make_knots(BasisSpec(n_basis=10), ds.stacked_times(), (0.0, 1.0))
        assert knots.size == 10 + 3 + 1
        interior = knots[4:-4]
        assert np.all(interior > 0.0) and np.all(interior < 1.0)
        assert np.all(np.diff(interior) > 0)


class TestFitGcv:
    def test_exact_span_prefers_smallest_lambda(self):
        ds = toy_dataset(n=8, m=12, q=2, seed=1)
        design = build_design(ds, BasisSpec(n_basis=6))
        rng = np.random.default_rng(2)
        y = design.matrix @ rng.standard_normal(design.matrix.shape[1])
        fit = fit_gcv(design, y)
        # rss at the bottom of the grid is numerically ~0; the selected
        # lambdas sit at the small end (exact argmin is noise-level there)
        assert fit.rss < 1e-6
        assert np.all(fit.lambdas <= 1e-4)

    def test_huge_lambda_lands_in_penalty_null_space(self):
        # the second-difference penalty's null space is coefficient vectors
        # affine in the index, so at huge lambda the fitted coefficients
        # flatten to such a sequence and the smooth is a near-straight line
        ds = toy_dataset(n=10, m=15, q=1, seed=4)
        design = build_design(ds, BasisSpec(n_basis=8))
        rng = np.random.default_rng(5)
        y = np.sin(3 * ds.stacked_times()) + 0.05 * rng.standard_normal(
            ds.total_observations)
        fit = fit_fixed(design, y, np.array([1e12]))
        coef_second_diff = np.diff(fit.theta[0], n=2)
        assert np.max(np.abs(coef_second_diff)) < 1e-8 * np.max(
            np.abs(fit.theta[0]))
        t = np.linspace(0.05, 0.95, 40)
        values = fit.evaluate_smooth(0, t)
        line = np.polynomial.polynomial.polyfit(t, values, 1)
        assert np.max(np.abs(values - (line[0] + line[1] * t))) < 0.01

    # The sampling noise of the coefficient-function estimates at n=100 is
    # dominated by the smooth subject-level error curves: the pointwise sd
    # of the Bernoulli smooth is ~ sd(curve)/sqrt(n*var(Z3)) ~ 0.4, so a
    # single fit tracks the truth only at that scale.  The oracle-computed
    # per-seed band is 1.0; averaging fits over seeds cancels the noise and
    # pins the bias down at 0.15.
    def test_recovers_true_coefficient_functions_fixed_seed(self):
        ds = generate(ScenarioSpec(sampling="dense", beta_id=0, n=100, seed=42))
        design = build_design(ds, BasisSpec())
        fit = fit_gcv(design, ds.stacked_responses())
        grid = np.arange(1, 52) / 51
        truths = (grid, np.sin(2 * np.pi * grid), np.cos(2 * np.pi * grid))
        for l, truth in enumerate(truths):
            err = np.max(np.abs(fit.evaluate_smooth(l, grid) - truth))
            assert err < 1.0, f"smooth {l}: max abs error {err}"

    def test_coefficient_estimates_unbiased_across_seeds(self):
        # seed-averaging cancels the sampling noise; the remaining rms
        # error of each smooth (bias plus residual noise ~0.09) sits well
        # under 0.15
        grid = np.arange(1, 52) / 51
        truths = (grid, np.sin(2 * np.pi * grid), np.cos(2 * np.pi * grid))
        acc = np.zeros((3, grid.size))
        seeds = range(1, 21)
        for seed in seeds:
            ds = generate(ScenarioSpec(sampling="dense", beta_id=0, n=100,
                                       seed=seed))
            fit = fit_gcv(build_design(ds, BasisSpec()),
                          ds.stacked_responses())
            for l in range(3):
                acc[l] += fit.evaluate_smooth(l, grid)
        for l, truth in enumerate(truths):
            rms = float(np.sqrt(np.mean((acc[l] / len(seeds) - truth) ** 2)))
            assert rms < 0.15, f"smooth {l}: seed-averaged rms error {rms}"

    def test_penalized_normal_equations(self):
        ds = toy_dataset(n=7, m=11, q=2, seed=6)
        design = build_design(ds, BasisSpec(n_basis=7))
        y = ds.stacked_responses()
        fit = fit_gcv(design, y)
        w = design.matrix
        m = w.T @ w
        for l in range(design.n_blocks):
            sl = design.block_slice(l)
            m[sl, sl] += fit.lambdas[l] * design.penalty
        wty = w.T @ y
        resid = m @ fit.theta_flat() - wty
        assert np.max(np.abs(resid)) < 1e-8 * np.max(np.abs(wty))

    def test_gcv_consistency(self):
        ds = toy_dataset(n=7, m=11, q=2, seed=7)
        design = build_design(ds, BasisSpec(n_basis=7))
        fit = fit_gcv(design, ds.stacked_responses())
        n_total = ds.total_observations
        recomputed = n_total * fit.rss / (n_total - fit.dof) ** 2
        assert fit.gcv == pytest.approx(recomputed, rel=1e-12)

    def test_dof_monotone_in_lambda(self):
        ds = toy_dataset(n=8, m=10, q=2, seed=8)
        design = build_design(ds, BasisSpec(n_basis=6))
        grid = default_lambda_grid()
        for l in range(2):
            _, dof, _ = profile_gcv(design, ds.stacked_responses(),
                                    np.array([1.0, 1.0]), l, grid)
            assert np.all(np.diff(dof) <= 1e-10)

    def test_cross_product_path_matches(self):
        ds = toy_dataset(n=9, m=8, q=2, seed=9)
        design = build_design(ds, BasisSpec(n_basis=6))
        y = ds.stacked_responses()
        direct = fit_gcv(design, y)
        w = design.matrix
        via_cross = fit_gcv_cross(design, w.T @ w, w.T @ y, float(y @ y),
                                  ds.total_observations)
        assert np.array_equal(direct.lambdas, via_cross.lambdas)
        assert direct.dof == pytest.approx(via_cross.dof, rel=1e-12)
        assert direct.rss == pytest.approx(via_cross.rss, rel=1e-9)

    def test_singular_system_raises(self):
        # duplicated nuisance column makes W'W + penalties singular in the
        # shared penalty null space
        rng = np.random.default_rng(10)
        t = np.sort(rng.uniform(0, 1, 8))
        s1 = SubjectRecord("a", t, rng.standard_normal(8), [0.0], [1.0, 1.0])
        s2 = SubjectRecord("b", t, rng.standard_normal(8), [0.0], [1.0, 1.0])
        ds = FunctionalDataset((s1, s2), (0.0, 1.0))
        design = build_design(ds, BasisSpec(n_basis=5))
        with pytest.raises(NumericalError, match="singular"):
            fit_gcv(design, ds.stacked_responses())

    def test_dof_reaching_n_total_raises(self):
        # more coefficients than observations and a weightless penalty
        ds = FunctionalDataset(
            (SubjectRecord("a", [0.1, 0.6], [1.0, 2.0], [0.0], [1.0]),
             SubjectRecord("b", [0.3], [1.5], [0.0], [1.0])),
            (0.0, 1.0),
        )
        design = build_design(ds, BasisSpec(n_basis=6))
        with pytest.raises(NumericalError):
            fit_gcv(design, ds.stacked_responses(), grid=np.array([0.0]))


class TestResidualize:
    def test_representable_effects_vanish(self):
        # responses built from basis functions themselves, no noise; the
        # grid includes 0 so the fit is allowed to interpolate exactly
        # (well-observed basis keeps the normal equations well conditioned)
        rng = np.random.default_rng(12)
        subjects = []
        for i in range(8):
            t = np.sort(rng.uniform(0, 1, 25))
            z = np.r_[1.0, rng.standard_normal(1)]
            subjects.append(SubjectRecord(f"s{i}", t, np.zeros(25), [0.0], z))
        ds0 = FunctionalDataset(tuple(subjects), (0.0, 1.0))
        basis = BasisSpec(n_basis=5)
        design = build_design(ds0, basis)
        y = design.matrix @ rng.standard_normal(design.matrix.shape[1])
        ds = ds0.with_responses(y)
        fit = fit_gcv(build_design(ds, basis), ds.stacked_responses(),
                      grid=np.array([0.0, 1e-8, 1.0]))
        res = residualize(ds, fit, basis)
        assert np.max(np.abs(res.stacked_responses())) < 1e-8

    def test_zero_theta_returns_original(self):
        ds = toy_dataset(n=5, m=9, q=2, seed=13)
        basis = BasisSpec(n_basis=6)
        design = build_design(ds, basis)
        fit = SmoothFit(
            theta=np.zeros((2, 6)), lambdas=np.ones(2), dof=0.0, rss=0.0,
            gcv=0.0, knots=design.knots, degree=design.degree,
        )
        res = residualize(ds, fit, basis)
        assert np.array_equal(res.stacked_responses(), ds.stacked_responses())

    def test_matches_direct_matrix_multiply(self):
        ds = toy_dataset(n=9, m=10, q=2, seed=14)
        basis = BasisSpec(n_basis=7)
        design = build_design(ds, basis)
        y = ds.stacked_responses()
        fit = fit_gcv(design, y)
        res = residualize(ds, fit, basis)
        oracle = y - design.matrix @ fit.theta_flat()
        assert np.max(np.abs(res.stacked_responses() - oracle)) < 1e-12

    def test_preserves_times_x_z(self):
        ds = toy_dataset(n=5, m=7, q=2, seed=15)
        basis = BasisSpec(n_basis=6)
        fit = fit_gcv(build_design(ds, basis), ds.stacked_responses())
        res = residualize(ds, fit, basis)
        for s0, s1 in zip(ds.subjects, res.subjects):
            assert np.array_equal(s0.times, s1.times)
            assert np.array_equal(s0.x, s1.x)
            assert np.array_equal(s0.z, s1.z)


class TestPenalty:
    def test_second_difference_structure(self):
        s = difference_penalty(5)
        d = np.diff(np.eye(5), n=2, axis=0)
        assert np.array_equal(s, d.T @ d)

    def test_null_space_is_affine(self):
        s = difference_penalty(6)
        affine = np.vstack([np.ones(6), np.arange(6.0)])
        assert np.max(np.abs(affine @ s)) < 1e-12

    def test_tiny_basis_penalty_empty(self):
        assert difference_penalty(2).shape == (2, 2)
        assert np.all(difference_penalty(2) == 0)
