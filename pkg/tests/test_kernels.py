"""Covariate kernels, Gram assembly, Kronecker fast path."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fosr.dataset import FunctionalDataset, SubjectRecord
from fosr.errors import DataError
from fosr.kernels import (
    KernelSpec,
    assemble,
    assemble_kronecker,
    covariate_kernel,
    covariate_gram,
    median_heuristic,
    time_kernel_matrix,
)


def dataset_from(x_rows, times_per_subject, domain=(0.0, 1.0)):
    subjects = tuple(
        SubjectRecord(f"s{i:02d}", t, np.zeros(len(t)), x, [1.0])
        for i, (x, t) in enumerate(zip(x_rows, times_per_subject))
    )
    return FunctionalDataset(subjects, domain)


def random_dataset(rng, n=4, p=2, max_m=5):
    x = rng.standard_normal((n, p))
    times = [np.sort(rng.choice(np.linspace(0, 1, 12), size=rng.integers(1, max_m + 1),
                                replace=False)) for _ in range(n)]
    return dataset_from(x, times)


class TestCovariateKernel:
    def test_linear_orthogonal_vectors(self):
        spec = KernelSpec(family="linear")
        assert covariate_kernel(spec, [1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_gaussian_identical_vectors(self):
        spec = KernelSpec(family="gaussian", bandwidth=2.5)
        assert covariate_kernel(spec, [0.3, -1.2], [0.3, -1.2]) == 1.0

    def test_quadratic_direct_value(self):
        spec = KernelSpec(family="quadratic")
        assert covariate_kernel(spec, [1.0, 1.0], [1.0, 1.0]) == 9.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError, match="dimension"):
            covariate_kernel(KernelSpec(family="linear"), [1.0], [1.0, 2.0])

    def test_gaussian_needs_bandwidth(self):
        with pytest.raises(DataError, match="bandwidth"):
            covariate_kernel(KernelSpec(family="gaussian"), [1.0], [2.0])

    def test_gram_matches_pairwise(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 3))
        for family in ("linear", "quadratic", "gaussian"):
            spec = KernelSpec(family=family, bandwidth=1.7)
            gram = covariate_gram(spec, x)
            for i in range(5):
                for j in range(5):
                    assert gram[i, j] == pytest.approx(
                        covariate_kernel(spec, x[i], x[j]), rel=1e-12, abs=1e-15)


class TestMedianHeuristic:
    def test_two_subjects(self):
        ds = dataset_from([[0.0], [2.0]], [[0.1], [0.2]])
        assert median_heuristic(ds) == 4.0

    def test_three_subjects_enumerated_pairs(self):
        # squared distances {1, 4, 1} -> median 1
        ds = dataset_from([[0.0], [1.0], [2.0]], [[0.1], [0.2], [0.3]])
        assert median_heuristic(ds) == 1.0

    def test_identical_covariates_error(self):
        ds = dataset_from([[1.0], [1.0]], [[0.1], [0.2]])
        with pytest.raises(DataError, match="degenerate"):
            median_heuristic(ds)


class TestAssemble:
    def test_single_subject_single_time(self):
        ds = dataset_from([[1.5, -0.5]], [[0.4]])
        km = assemble(KernelSpec(family="linear"), ds)
        dense = km.dense()
        assert dense.shape == (1, 1)
        assert dense[0, 0] == 1.5**2 + 0.5**2  # L(X, X) * exp(0)

    def test_identical_subjects_identical_blocks(self):
        t = [0.1, 0.5, 0.9]
        ds = dataset_from([[1.0, 2.0], [1.0, 2.0]], [t, t])
        km = assemble(KernelSpec(family="quadratic"), ds)
        assert np.array_equal(km.block(0, 1), km.block(0, 0))

    def test_matches_brute_force_double_loop(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, n=3, p=2)
        spec = KernelSpec(family="gaussian", bandwidth=1.3)
        km = assemble(spec, ds)
        dense = km.dense()
        stacked = [(s.x, t) for s in ds.subjects for t in s.times]
        for a, (xa, ta) in enumerate(stacked):
            for b, (xb, tb) in enumerate(stacked):
                expected = covariate_kernel(spec, xa, xb) * np.exp(-(ta - tb) ** 2)
                assert abs(dense[a, b] - expected) < 1e-14

    def test_separability_entrywise(self):
        rng = np.random.default_rng(2)
        ds = random_dataset(rng, n=3)
        spec = KernelSpec(family="linear")
        km = assemble(spec, ds)
        for i in range(3):
            for j in range(3):
                t_block = km.time_block(i, j)
                expected = time_kernel_matrix(spec, ds.subjects[i].times,
                                              ds.subjects[j].times)
                assert np.array_equal(km.block(i, j), km.A[i, j] * expected)
                assert np.array_equal(t_block, expected)

    def test_exponential_time_kernel(self):
        ds = dataset_from([[1.0], [2.0]], [[0.2], [0.6]])
        km = assemble(KernelSpec(family="linear", time_kernel="exponential"), ds)
        assert km.block(0, 1)[0, 0] == pytest.approx(2.0 * np.exp(-0.4))

    def test_median_heuristic_resolved_into_spec(self):
        ds = dataset_from([[0.0], [2.0]], [[0.1], [0.2]])
        km = assemble(KernelSpec(family="gaussian"), ds)
        assert km.spec.bandwidth == 4.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000),
           family=st.sampled_from(["linear", "quadratic", "gaussian"]))
    def test_gram_psd(self, seed, family):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((rng.integers(2, 7), rng.integers(1, 4)))
        spec = KernelSpec(family=family, bandwidth=2.0)
        vals = np.linalg.eigvalsh(covariate_gram(spec, x))
        assert vals[0] >= -1e-8 * max(vals[-1], 0.0)


class TestAssembleKronecker:
    def test_fully_observed_is_exact_kron(self):
        grid = np.linspace(0.0, 1.0, 5)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 2))
        ds = dataset_from(x, [grid] * 3)
        spec = KernelSpec(family="linear")
        km = assemble_kronecker(spec, ds, grid)
        a = covariate_gram(spec, x)
        t = time_kernel_matrix(spec, grid, grid)
        assert np.array_equal(km.dense(), np.kron(a, t))

    def test_one_observation_per_subject(self):
        grid = np.linspace(0.0, 1.0, 6)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 1))
        picks = [1, 3, 0, 5]
        ds = dataset_from(x, [[grid[k]] for k in picks])
        spec = KernelSpec(family="linear")
        km = assemble_kronecker(spec, ds, grid)
        a = covariate_gram(spec, x)
        times = np.array([grid[k] for k in picks])
        expected = a * time_kernel_matrix(spec, times, times)
        assert np.array_equal(km.dense(), expected)

    def test_random_mask_equals_assemble(self):
        rng = np.random.default_rng(5)
        grid = np.linspace(0.0, 1.0, 6)
        x = rng.standard_normal((4, 2))
        times = [np.sort(rng.choice(grid, size=rng.integers(1, 5), replace=False))
                 for _ in range(4)]
        ds = dataset_from(x, times)
        spec = KernelSpec(family="gaussian", bandwidth=0.9)
        km_naive = assemble(spec, ds)
        km_kron = assemble_kronecker(spec, ds, grid)
        assert np.max(np.abs(km_naive.dense() - km_kron.dense())) <= 1e-14

    def test_off_grid_time_rejected(self):
        grid = np.linspace(0.0, 1.0, 5)
        ds = dataset_from([[1.0], [2.0]], [[grid[1]], [0.33]])
        with pytest.raises(DataError, match="master grid"):
            assemble_kronecker(KernelSpec(family="linear"), ds, grid)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_kron_equals_naive_property(self, seed):
        rng = np.random.default_rng(seed)
        grid = np.linspace(0.0, 1.0, 7)
        n = int(rng.integers(2, 5))
        x = rng.standard_normal((n, 2))
        times = [np.sort(rng.choice(grid, size=rng.integers(1, 7), replace=False))
                 for _ in range(n)]
        ds = dataset_from(x, times)
        spec = KernelSpec(family="quadratic")
        assert np.max(np.abs(assemble(spec, ds).dense()
                             - assemble_kronecker(spec, ds, grid).dense())) <= 1e-14


class TestPermutationEquivariance:
    def test_relabeling_permutes_gram(self):
        rng = np.random.default_rng(6)
        ds = random_dataset(rng, n=5, p=2)
        spec = KernelSpec(family="gaussian", bandwidth=1.1)
        km = assemble(spec, ds)
        perm = rng.permutation(5)
        ds_perm = ds.with_x(ds.x_matrix()[perm])
        km_perm = assemble(spec, ds_perm)
        assert np.allclose(km_perm.A, km.A[np.ix_(perm, perm)])
        # time blocks stay attached to their time sets
        for i in range(5):
            assert np.array_equal(km_perm.time_block(i, i), km.time_block(i, i))
