"""Association testing between scalar covariates and functional responses.

The package fits a varying-coefficient nuisance model, estimates the
residual covariance by functional PCA, and tests for any covariate effect
with a kernel-machine variance-component score statistic calibrated by a
permutation null.  A linear function-on-scalar F-like statistic is
included as a baseline, plus a simulation bench for operating
characteristics.
"""

from ._version import __version__
from .dataset import (
    ColumnSpec,
    FunctionalDataset,
    ResidualDataset,
    SubjectRecord,
    load_long_csv,
    save_long_csv,
    validate,
)
from .smoothing import BasisSpec, SmoothFit, build_design, fit_gcv, residualize
from .covariance import (
    BlockPrecision,
    CovarianceModel,
    estimate_covariance,
    subject_blocks,
    whiten,
)
from .kernels import (
    KernelMatrix,
    KernelSpec,
    assemble,
    assemble_kronecker,
    covariate_kernel,
    median_heuristic,
)
from .score import (
    TestConfig,
    TestResult,
    permutation_test,
    run_test,
    score_components,
    statistic,
)
from .ftest import FResult, f_permutation_test, f_statistic
from .simulate import ScenarioSpec, BenchResult, generate, power_study, type1_study

__all__ = [
    "__version__",
    "ColumnSpec", "FunctionalDataset", "ResidualDataset", "SubjectRecord",
    "load_long_csv", "save_long_csv", "validate",
    "BasisSpec", "SmoothFit", "build_design", "fit_gcv", "residualize",
    "BlockPrecision", "CovarianceModel", "estimate_covariance",
    "subject_blocks", "whiten",
    "KernelMatrix", "KernelSpec", "assemble", "assemble_kronecker",
    "covariate_kernel", "median_heuristic",
    "TestConfig", "TestResult", "permutation_test", "run_test",
    "score_components", "statistic",
    "FResult", "f_permutation_test", "f_statistic",
    "ScenarioSpec", "BenchResult", "generate", "power_study", "type1_study",
]
