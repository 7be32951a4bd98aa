"""Simulation scenarios, type-I error and power studies.

Data generator
--------------
For each subject: p covariates of interest drawn standard normal; nuisance
covariates (1, N(0,1), Bernoulli(0.4)) with coefficient functions t,
sin(2*pi*t), cos(2*pi*t); errors sqrt(2)*a1*cos(2*pi*t) +
sqrt(2)*a2*sin(2*pi*t) + white noise, with Var(a1)=1, Var(a2)=2,
Var(noise)=1.  Dense sampling puts every subject on the grid j/m, j=1..m;
sparse sampling subsamples m_i in {7..14} of those points without
replacement.

Covariate effects, scaled by delta and built from the row means
xbar = mean(X_i) and xbar2 = (sum(X_i))^2 / p:

    1: delta * xbar * t            (linear)
    2: delta * xbar2 * t           (quadratic)
    3: delta * exp(-xbar * t)      (non-separable)
    4: delta * exp(-xbar2 * t)     (non-separable, even in X)

Every stochastic draw comes from a stream keyed by (seed, replicate,
role), so study results do not depend on scheduling, on the set of
methods requested, or on the order replicates run.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from .covariance import estimate_covariance, subject_blocks
from .dataset import FunctionalDataset, SubjectRecord
from .errors import DataError
from .ftest import f_permutation_test
from .kernels import KernelSpec, assemble
from .score import permutation_test
from .smoothing import BasisSpec, build_design, fit_gcv, residualize
from .svg import line_chart

SCORE_METHODS = ("linear", "quadratic", "gaussian")
DEFAULT_ALPHAS = (0.01, 0.05, 0.1)

# role codes for the named RNG streams
_X, _Z2, _Z3, _A1, _A2, _NOISE, _MSIZE, _SUBSAMPLE, _PERM, _PERM_F = range(10)


def _stream(seed: int, replicate: int, role: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(replicate), int(role)])


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation scenario (a null scenario has beta_id 0)."""

    sampling: str = "dense"  # dense | sparse
    beta_id: int = 0  # 0..4
    delta: float = 0.0
    n: int = 100
    p: int = 5
    q: int = 3
    m_dense: int = 51
    sparse_m_range: tuple[int, int] = (7, 14)
    seed: int = 0

    def __post_init__(self):
        if self.sampling not in ("dense", "sparse"):
            raise DataError(f"unknown sampling {self.sampling!r}")
        if self.beta_id not in (0, 1, 2, 3, 4):
            raise DataError("beta_id must be in 0..4")
        if self.delta < 0:
            raise DataError("delta must be nonnegative")
        if self.q != 3:
            raise DataError("the generator defines exactly 3 nuisance covariates")

    @property
    def name(self) -> str:
        tag = "null" if self.beta_id == 0 else f"b{self.beta_id}"
        return f"{self.sampling}-{tag}"


def _effect(beta_id: int, delta: float, x_row: np.ndarray,
            t: np.ndarray) -> np.ndarray:
    if beta_id == 0 or delta == 0.0:
        return np.zeros_like(t)
    xbar = x_row.mean()
    xbar2 = x_row.sum() ** 2 / x_row.size
    if beta_id == 1:
        return delta * xbar * t
    if beta_id == 2:
        return delta * xbar2 * t
    if beta_id == 3:
        return delta * np.exp(-xbar * t)
    return delta * np.exp(-xbar2 * t)


def generate(spec: ScenarioSpec, replicate: int = 0) -> FunctionalDataset:
    """Draw one dataset for the scenario; deterministic in (seed, replicate)."""
    n, p, m = spec.n, spec.p, spec.m_dense
    x = _stream(spec.seed, replicate, _X).standard_normal((n, p))
    z2 = _stream(spec.seed, replicate, _Z2).standard_normal(n)
    z3 = (_stream(spec.seed, replicate, _Z3).random(n) < 0.4).astype(float)
    a1 = _stream(spec.seed, replicate, _A1).standard_normal(n)
    a2 = _stream(spec.seed, replicate, _A2).standard_normal(n) * np.sqrt(2.0)
    noise_rng = _stream(spec.seed, replicate, _NOISE)

    grid = np.arange(1, m + 1) / m
    if spec.sampling == "sparse":
        lo, hi = spec.sparse_m_range
        sizes = _stream(spec.seed, replicate, _MSIZE).integers(lo, hi + 1, n)
        pick_rng = _stream(spec.seed, replicate, _SUBSAMPLE)
        times = [np.sort(pick_rng.choice(grid, size=int(sizes[i]), replace=False))
                 for i in range(n)]
    else:
        times = [grid] * n

    subjects = []
    width = len(str(n))  # zero-pad ids so lexicographic order == numeric
    for i in range(n):
        t = times[i]
        z = np.array([1.0, z2[i], z3[i]])
        signal = (z[0] * t + z[1] * np.sin(2 * np.pi * t)
                  + z[2] * np.cos(2 * np.pi * t))
        eps = (np.sqrt(2.0) * a1[i] * np.cos(2 * np.pi * t)
               + np.sqrt(2.0) * a2[i] * np.sin(2 * np.pi * t)
               + noise_rng.standard_normal(t.size))
        y = signal + _effect(spec.beta_id, spec.delta, x[i], t) + eps
        subjects.append(SubjectRecord(f"s{i:0{width}d}", t, y, x[i], z))
    return FunctionalDataset(tuple(subjects), (grid[0], grid[-1]))


@dataclass(frozen=True)
class BenchResult:
    """Per-replicate p-values of a study, with rate estimators on top."""

    scenario: ScenarioSpec
    methods: tuple[str, ...]
    deltas: tuple[float, ...]
    p_values: dict  # method -> {delta -> array of p-values}
    permutations: int
    replicates: int
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    runtime_s: float = 0.0

    def rejection_rate(self, method: str, alpha: float, delta: float = 0.0,
                       formula: str = "proportion") -> float:
        """Type-I estimate at level alpha.

        ``proportion`` is the plain rejection fraction #{p <= alpha} / s.
        ``printed`` is (#{p > alpha} + 1) / (s + 1), kept for reference;
        it estimates the acceptance rate, not the error rate.
        """
        p = np.asarray(self.p_values[method][delta])
        if formula == "proportion":
            return float(np.mean(p <= alpha))
        if formula == "printed":
            return float((np.sum(p > alpha) + 1) / (p.size + 1))
        raise DataError(f"unknown estimator formula {formula!r}")

    def power(self, method: str, delta: float, alpha_pow: float = 0.05) -> float:
        """Fraction of replicates with p < alpha_pow."""
        p = np.asarray(self.p_values[method][delta])
        return float(np.mean(p < alpha_pow))

    def rates_jsonable(self) -> dict:
        out: dict = {
            "scenario": self.scenario.name,
            "replicates": self.replicates,
            "permutations": self.permutations,
            "methods": list(self.methods),
            "deltas": list(self.deltas),
        }
        if self.scenario.beta_id == 0:
            out["type1"] = {
                m: {str(a): self.rejection_rate(m, a) for a in self.alphas}
                for m in self.methods
            }
            out["type1_printed_formula"] = {
                m: {str(a): self.rejection_rate(m, a, formula="printed")
                    for a in self.alphas}
                for m in self.methods
            }
        else:
            out["power"] = {
                m: {f"{d:g}": self.power(m, d) for d in self.deltas}
                for m in self.methods
            }
        return out


def _replicate_pvalues(spec: ScenarioSpec, replicate: int, permutations: int,
                       methods: tuple[str, ...], basis: BasisSpec,
                       fast_f: bool) -> dict:
    """p-value per requested method for one generated dataset."""
    ds = generate(spec, replicate)
    out: dict = {}
    score_methods = [m for m in methods if m in SCORE_METHODS]
    if score_methods:
        design = build_design(ds, basis)
        fit = fit_gcv(design, ds.stacked_responses())
        res = residualize(ds, fit, basis)
        model = estimate_covariance(res)
        blocks = subject_blocks(model, res)
        for m in score_methods:
            km = assemble(KernelSpec(family=m), ds)
            result = permutation_test(
                ds, res, blocks, km, permutations,
                seed=(spec.seed, replicate, _PERM),
            )
            out[m] = result.p_value
    if "f" in methods:
        result = f_permutation_test(
            ds, permutations, seed=(spec.seed, replicate, _PERM_F),
            basis=basis, fast=fast_f,
        )
        out["f"] = result.p_value
    return out


def _work_task(args):
    """Module-level adapter so worker pools can pickle the call."""
    spec, delta, replicate, permutations, methods, basis, fast_f = args
    pv = _replicate_pvalues(replace(spec, delta=delta), replicate,
                            permutations, methods, basis, fast_f)
    return (delta, replicate), pv


def _collect(spec: ScenarioSpec, deltas, replicates: int, permutations: int,
             methods, basis: BasisSpec, fast_f: bool, workers: int) -> dict:
    """p_values[method][delta] -> array(s); replicate-indexed, order-free."""
    methods = tuple(methods)
    tasks = [(spec, d, r, permutations, methods, basis, fast_f)
             for d in deltas for r in range(replicates)]

    results: dict = {}
    if workers > 1 and len(tasks) > 1:
        # replicate seeds are keyed by (seed, replicate, role), so the split
        # across workers cannot change any generated number
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for key, pv in pool.map(_work_task, tasks, chunksize=4):
                    results[key] = pv
        except (OSError, PermissionError):
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for key, pv in pool.map(_work_task, tasks):
                    results[key] = pv
    else:
        for task in tasks:
            key, pv = _work_task(task)
            results[key] = pv

    out = {m: {} for m in methods}
    for d in deltas:
        for m in methods:
            out[m][d] = np.array([results[(d, r)][m] for r in range(replicates)])
    return out


def type1_study(spec: ScenarioSpec, replicates: int, permutations: int,
                alphas: tuple[float, ...] = DEFAULT_ALPHAS,
                methods=SCORE_METHODS, basis: BasisSpec | None = None,
                fast_f: bool = False, threads: int = 1) -> BenchResult:
    """Null rejection rates for each method at the requested levels."""
    if spec.beta_id != 0:
        raise DataError("type-I study requires a null scenario (beta_id = 0)")
    start = perf_counter()
    pv = _collect(spec, (0.0,), replicates, permutations, methods,
                  basis or BasisSpec(), fast_f, threads)
    return BenchResult(
        scenario=spec, methods=tuple(methods), deltas=(0.0,), p_values=pv,
        permutations=permutations, replicates=replicates, alphas=tuple(alphas),
        runtime_s=perf_counter() - start,
    )


def power_study(spec: ScenarioSpec, deltas, replicates: int, permutations: int,
                methods=SCORE_METHODS, basis: BasisSpec | None = None,
                fast_f: bool = False, threads: int = 1) -> BenchResult:
    """Rejection rate at each delta in the grid for each method."""
    if spec.beta_id not in (1, 2, 3, 4):
        raise DataError("power study requires beta_id in 1..4")
    deltas = tuple(float(d) for d in deltas)
    start = perf_counter()
    pv = _collect(spec, deltas, replicates, permutations, methods,
                  basis or BasisSpec(), fast_f, threads)
    return BenchResult(
        scenario=spec, methods=tuple(methods), deltas=deltas, p_values=pv,
        permutations=permutations, replicates=replicates,
        runtime_s=perf_counter() - start,
    )


def emit_plots(bench: BenchResult, out_dir, alpha_pow: float = 0.05) -> list[Path]:
    """Write the tidy power CSV and a line-chart SVG; deterministic bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = bench.scenario.name
    csv_path = out_dir / f"power-{name}.csv"
    rows = ["scenario,kernel,delta,power"]
    for m in bench.methods:
        for d in bench.deltas:
            rows.append(f"{name},{m},{d:g},{bench.power(m, d, alpha_pow):.6g}")
    csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")

    series = [
        (m, [float(d) for d in bench.deltas],
         [bench.power(m, d, alpha_pow) for d in bench.deltas])
        for m in bench.methods
    ]
    svg_path = out_dir / f"power-{name}.svg"
    svg_path.write_text(
        line_chart(series, title=f"Power ({name})", x_label="effect size",
                   y_label="power", y_range=(0.0, 1.0), h_line=alpha_pow),
        encoding="utf-8",
    )
    return [csv_path, svg_path]
