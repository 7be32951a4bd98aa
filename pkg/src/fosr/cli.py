"""Command-line interface: test, simulate, validate, describe-covariance.

Exit codes: 0 success, 1 usage error, 2 data validation failure,
3 numerical failure.  Result files are JSON/CSV/SVG with deterministic
bytes for a given seed; the run manifest (config, input hash, timings)
is written atomically next to each output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from time import perf_counter

import numpy as np

from ._version import MANIFEST_SCHEMA_VERSION, __version__
from .covariance import estimate_covariance
from .dataset import ColumnSpec, load_long_csv, rescale_time, validate
from .errors import DataError, FosrError, NumericalError, StageFailure
from .ftest import f_permutation_test
from .kernels import KernelSpec
from .score import TestConfig, run_test
from .simulate import (
    DEFAULT_ALPHAS,
    SCORE_METHODS,
    ScenarioSpec,
    emit_plots,
    power_study,
    type1_study,
)
from .smoothing import BasisSpec, build_design, fit_gcv, residualize


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _comma_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_deltas(raw: str) -> tuple[float, ...]:
    """Either 'start:stop:step' (inclusive) or a comma list."""
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise DataError("--deltas range must be start:stop:step")
        start, stop, step = (float(v) for v in parts)
        if step <= 0:
            raise DataError("--deltas step must be positive")
        count = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 10) for i in range(count)
                     if start + i * step <= stop + 1e-12)
    return tuple(float(v) for v in _comma_list(raw))


def _parse_lambda_grid(raw: str) -> np.ndarray:
    parts = raw.split(",")
    if len(parts) != 3:
        raise DataError("--lambda-grid must be lo,hi,count (log10 endpoints)")
    lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    if count < 1:
        raise DataError("--lambda-grid count must be >= 1")
    return np.logspace(lo, hi, count)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(target: Path, config: dict, timings: dict,
                    wall_s: float, input_path: Path | None) -> None:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "input_sha256": _sha256(input_path) if input_path else None,
        "wall_clock_s": wall_s,
        "stage_timings_s": timings,
    }
    _atomic_write(target, _json_dumps(manifest))


def _add_schema_flags(sub) -> None:
    sub.add_argument("--data", required=True, help="long-format CSV file")
    sub.add_argument("--id-col", default="id")
    sub.add_argument("--time-col", default="time")
    sub.add_argument("--y-col", default="y")
    sub.add_argument("--x-cols", default="", help="comma-separated X columns")
    sub.add_argument("--z-cols", default="", help="comma-separated Z columns")
    sub.add_argument("--rescale-time", action="store_true",
                     help="affinely map times onto [0, 1]")


def _add_model_flags(sub) -> None:
    sub.add_argument("--basis-dim", type=int, default=10)
    sub.add_argument("--lambda-grid", default="-6,6,25",
                     help="lo,hi,count on the log10 scale")
    sub.add_argument("--pve", type=float, default=0.95)
    sub.add_argument("--cov-grid", type=int, default=51)
    sub.add_argument("--cov-bandwidth", default="auto",
                     help="'auto' (coverage rule) or a positive value")


def _load_dataset(args):
    schema = ColumnSpec(
        id_col=args.id_col, time_col=args.time_col, y_col=args.y_col,
        x_cols=_comma_list(args.x_cols), z_cols=_comma_list(args.z_cols),
    )
    ds = load_long_csv(args.data, schema)
    if args.rescale_time:
        ds = rescale_time(ds)
    return ds


def _build_parser() -> _Parser:
    parser = _Parser(prog="fosr", description=__doc__)
    parser.add_argument(
        "--version", action="version",
        version=f"fosr {__version__} (manifest schema {MANIFEST_SCHEMA_VERSION})",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    test = subs.add_parser("test", parser_class=_Parser,
                           help="association test on a CSV dataset")
    _add_schema_flags(test)
    _add_model_flags(test)
    test.add_argument("--method", choices=("score", "f"), default="score")
    test.add_argument("--kernel", choices=("linear", "quadratic", "gaussian"),
                      default="gaussian")
    test.add_argument("--bandwidth", type=float, default=None,
                      help="gaussian kernel bandwidth (default: median heuristic)")
    test.add_argument("--time-kernel",
                      choices=("squared_exponential", "exponential"),
                      default="squared_exponential")
    test.add_argument("--perms", type=int, default=200)
    test.add_argument("--seed", type=int, default=0)
    test.add_argument("--fast-f", action="store_true",
                      help="freeze alternative-model smoothing per permutation")
    test.add_argument("--naive-permutation", action="store_true",
                      help="reassemble the kernel per permutation (oracle path)")
    test.add_argument("--out", default=None, help="result JSON path")
    test.add_argument("--threads", type=int, default=0)

    sim = subs.add_parser("simulate", parser_class=_Parser,
                          help="operating-characteristics studies")
    sim.add_argument("--scenario", default="dense-null",
                     help="dense|sparse - null|b1|b2|b3|b4, e.g. dense-b2")
    sim.add_argument("--deltas", default="",
                     help="effect grid: start:stop:step or comma list")
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--perms", type=int, default=200)
    sim.add_argument("--kernels", default="linear,quadratic,gaussian",
                     help="comma list from linear,quadratic,gaussian,f")
    sim.add_argument("--n", type=int, default=50)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--fast-f", action="store_true")
    sim.add_argument("--basis-dim", type=int, default=10)
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--threads", type=int, default=0)

    val = subs.add_parser("validate", parser_class=_Parser,
                          help="check a CSV dataset against the invariants")
    _add_schema_flags(val)

    desc = subs.add_parser("describe-covariance", parser_class=_Parser,
                           help="fit and report the residual covariance model")
    _add_schema_flags(desc)
    _add_model_flags(desc)
    desc.add_argument("--out", default=None, help="covariance JSON path")

    return parser


def _cov_bandwidth(raw: str) -> float | None:
    if raw == "auto":
        return None
    value = float(raw)
    if value <= 0:
        raise DataError("--cov-bandwidth must be positive or 'auto'")
    return value


def _cmd_test(args) -> int:
    start = perf_counter()
    ds = _load_dataset(args)
    timings: dict = {}
    if args.method == "f":
        basis = BasisSpec(n_basis=args.basis_dim)
        result = f_permutation_test(
            ds, args.perms, args.seed, basis=basis,
            grid=_parse_lambda_grid(args.lambda_grid), fast=args.fast_f,
        )
        payload = result.to_jsonable()
    else:
        config = TestConfig(
            kernel=KernelSpec(family=args.kernel, bandwidth=args.bandwidth),
            permutations=args.perms,
            seed=args.seed,
            basis=BasisSpec(n_basis=args.basis_dim),
            lambda_grid=_parse_lambda_grid(args.lambda_grid),
            pve=args.pve,
            cov_grid_size=args.cov_grid,
            cov_bandwidth=_cov_bandwidth(args.cov_bandwidth),
        )
        result = run_test(ds, config, naive=args.naive_permutation,
                          timings=timings)
        payload = result.to_jsonable()
    text = _json_dumps(payload)
    if args.out:
        out = Path(args.out)
        _atomic_write(out, text)
        _write_manifest(out.with_name(out.name + ".manifest.json"),
                        _resolved_config(args), timings,
                        perf_counter() - start, Path(args.data))
    else:
        sys.stdout.write(text)
    return 0


def _resolved_config(args) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "command"}
    for key, value in config.items():
        if isinstance(value, tuple):
            config[key] = list(value)
    return config


_SCENARIO_TAGS = {"null": 0, "b1": 1, "b2": 2, "b3": 3, "b4": 4}


def _parse_scenario(raw: str, n: int, seed: int) -> ScenarioSpec:
    try:
        sampling, tag = raw.split("-", 1)
    except ValueError:
        raise DataError(f"bad scenario {raw!r}; expected e.g. dense-null") from None
    if sampling not in ("dense", "sparse") or tag not in _SCENARIO_TAGS:
        raise DataError(f"bad scenario {raw!r}")
    return ScenarioSpec(sampling=sampling, beta_id=_SCENARIO_TAGS[tag],
                        n=n, seed=seed)


def _cmd_simulate(args) -> int:
    start = perf_counter()
    spec = _parse_scenario(args.scenario, args.n, args.seed)
    methods = _comma_list(args.kernels)
    unknown = [m for m in methods if m not in SCORE_METHODS + ("f",)]
    if unknown:
        raise DataError(f"unknown method(s) {unknown}")
    threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    basis = BasisSpec(n_basis=args.basis_dim)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if spec.beta_id == 0:
        bench = type1_study(spec, args.reps, args.perms, DEFAULT_ALPHAS,
                            methods, basis, args.fast_f, threads)
    else:
        deltas = _parse_deltas(args.deltas) if args.deltas else (spec.delta,)
        bench = power_study(spec, deltas, args.reps, args.perms, methods,
                            basis, args.fast_f, threads)

    rows = ["scenario,method,delta,replicate,p_value"]
    for m in bench.methods:
        for d in bench.deltas:
            for r, p in enumerate(bench.p_values[m][d]):
                rows.append(f"{bench.scenario.name},{m},{d:g},{r},{p:.17g}")
    _atomic_write(out_dir / "pvalues.csv", "\n".join(rows) + "\n")
    _atomic_write(out_dir / "rates.json", _json_dumps(bench.rates_jsonable()))
    if spec.beta_id != 0:
        emit_plots(bench, out_dir)
    _write_manifest(out_dir / "manifest.json", _resolved_config(args),
                    {"study": bench.runtime_s}, perf_counter() - start, None)
    return 0


def _cmd_validate(args) -> int:
    try:
        ds = _load_dataset(args)
    except DataError as exc:
        sys.stdout.write(f"load error: {exc}\n")
        return 2
    violations = validate(ds)
    if violations:
        for v in violations:
            sys.stdout.write(v + "\n")
        return 2
    sys.stdout.write(
        f"ok: {ds.n} subjects, {ds.total_observations} observations, "
        f"p={ds.p}, q={ds.q}\n"
    )
    return 0


def _cmd_describe_covariance(args) -> int:
    start = perf_counter()
    ds = _load_dataset(args)
    violations = validate(ds)
    if violations:
        raise DataError("; ".join(violations))
    basis = BasisSpec(n_basis=args.basis_dim)
    design = build_design(ds, basis)
    fit = fit_gcv(design, ds.stacked_responses(),
                  _parse_lambda_grid(args.lambda_grid))
    res = residualize(ds, fit, basis)
    model = estimate_covariance(res, grid_size=args.cov_grid,
                                pve_threshold=args.pve,
                                bandwidth=_cov_bandwidth(args.cov_bandwidth))
    payload = model.to_jsonable()
    payload["nuisance_fit"] = {
        "dof": fit.dof, "rss": fit.rss, "gcv": fit.gcv,
        "lambdas": fit.lambdas.tolist(),
    }
    text = _json_dumps(payload)
    if args.out:
        out = Path(args.out)
        _atomic_write(out, text)
        _write_manifest(out.with_name(out.name + ".manifest.json"),
                        _resolved_config(args), {},
                        perf_counter() - start, Path(args.data))
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "test": _cmd_test,
    "simulate": _cmd_simulate,
    "validate": _cmd_validate,
    "describe-covariance": _cmd_describe_covariance,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except StageFailure as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2 if isinstance(exc.original, DataError) else 3
    except DataError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except NumericalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except FosrError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
