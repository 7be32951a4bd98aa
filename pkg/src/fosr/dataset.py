"""In-memory representation and CSV ingestion of irregular longitudinal data.

A dataset holds one record per subject: observation times, responses at
those times, a vector of covariates under test (``x``) and a vector of
nuisance covariates (``z``, first entry always the constant 1).  Subjects
are stored in canonical order (sorted by id, times sorted within subject)
so that the representation never depends on input row order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """One subject: m_i observations plus time-constant covariates.

    Times are sorted ascending at construction (responses carried along),
    so the stored order is canonical regardless of input order.
    """

    id: str
    times: np.ndarray
    responses: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (self.id == other.id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.responses, other.responses)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.z, other.z))

    def __hash__(self):
        return hash((self.id, self.times.tobytes(), self.responses.tobytes(),
                     self.x.tobytes(), self.z.tobytes()))

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        responses = np.asarray(self.responses, dtype=float)
        if times.ndim != 1 or responses.shape != times.shape:
            raise DataError(
                f"subject {self.id!r}: times and responses must be "
                f"1-d and equal length"
            )
        if times.size == 0:
            raise DataError(f"subject {self.id!r}: at least one observation required")
        order = np.argsort(times, kind="stable")
        object.__setattr__(self, "times", _readonly(times[order]))
        object.__setattr__(self, "responses", _readonly(responses[order]))
        object.__setattr__(self, "x", _readonly(np.atleast_1d(self.x)))
        object.__setattr__(self, "z", _readonly(np.atleast_1d(self.z)))

    @property
    def m(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Immutable collection of subject records with shared covariate layout.

    Subjects are sorted by id at construction.  ``time_domain`` defaults to
    the observed [min, max] and is the interval all downstream smooths and
    grids operate on.
    """

    subjects: tuple[SubjectRecord, ...]
    time_domain: tuple[float, float] = field(default=None)  # type: ignore[assignment]

    def __eq__(self, other):
        if not isinstance(other, FunctionalDataset):
            return NotImplemented
        return (self.time_domain == other.time_domain
                and self.subjects == other.subjects)

    def __hash__(self):
        return hash((self.subjects, self.time_domain))

    def __post_init__(self):
        subjects = tuple(sorted(self.subjects, key=lambda s: s.id))
        if not subjects:
            raise DataError("dataset has no subjects")
        object.__setattr__(self, "subjects", subjects)
        if self.time_domain is None:
            lo = min(float(s.times.min()) for s in subjects)
            hi = max(float(s.times.max()) for s in subjects)
            object.__setattr__(self, "time_domain", (lo, hi))
        else:
            lo, hi = self.time_domain
            object.__setattr__(self, "time_domain", (float(lo), float(hi)))

    # -- shape accessors -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].x.size

    @property
    def q(self) -> int:
        return self.subjects[0].z.size

    @property
    def sizes(self) -> np.ndarray:
        """Per-subject observation counts m_i."""
        return np.array([s.m for s in self.subjects])

    @property
    def total_observations(self) -> int:
        return int(self.sizes.sum())

    # -- stacked views (subject-major order) ------------------------------

    def stacked_times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.subjects])

    def stacked_responses(self) -> np.ndarray:
        return np.concatenate([s.responses for s in self.subjects])

    def offsets(self) -> np.ndarray:
        """Start index of each subject's block in the stacked vectors."""
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

    def x_matrix(self) -> np.ndarray:
        return np.array([s.x for s in self.subjects])

    def z_matrix(self) -> np.ndarray:
        return np.array([s.z for s in self.subjects])

    def with_responses(self, stacked: np.ndarray) -> "FunctionalDataset":
        """Copy of this dataset with responses replaced from a stacked vector."""
        stacked = np.asarray(stacked, dtype=float)
        if stacked.shape != (self.total_observations,):
            raise DataError("replacement responses have wrong length")
        subjects = []
        pos = 0
        for s in self.subjects:
            subjects.append(
                SubjectRecord(s.id, s.times, stacked[pos : pos + s.m], s.x, s.z)
            )
            pos += s.m
        return type(self)(tuple(subjects), self.time_domain)

    def with_x(self, x_new: np.ndarray) -> "FunctionalDataset":
        """Copy with row i of ``x_new`` assigned to subject i (used by
        permutation oracles)."""
        x_new = np.asarray(x_new, dtype=float)
        subjects = tuple(
            SubjectRecord(s.id, s.times, s.responses, x_new[i], s.z)
            for i, s in enumerate(self.subjects)
        )
        return type(self)(subjects, self.time_domain)


class ResidualDataset(FunctionalDataset):
    """A dataset whose responses are residuals after nuisance removal."""


@dataclass(frozen=True)
class ColumnSpec:
    """Maps CSV column names to dataset roles."""

    id_col: str
    time_col: str
    y_col: str
    x_cols: tuple[str, ...]
    z_cols: tuple[str, ...] = ()


def _parse_cell(raw: str, col: str, line_no: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise DataError(
            f"line {line_no}: column {col!r}: non-numeric value {raw!r}"
        ) from None


def load_long_csv(path, schema: ColumnSpec) -> FunctionalDataset:
    """Read a long-format (tidy) CSV into a dataset.

    One row per observation; subject id, time and response columns plus
    any covariate columns named in ``schema``.  X and Z must be constant
    within a subject.  If the first Z column is not identically 1, an
    intercept column is prepended.

    Raises DataError on: missing columns, non-numeric cells, covariates
    varying within a subject, duplicate times within a subject, empty file.
    """
    groups: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        needed = [schema.id_col, schema.time_col, schema.y_col]
        needed += list(schema.x_cols) + list(schema.z_cols)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        n_rows = 0
        for line_no, row in enumerate(reader, start=2):
            n_rows += 1
            sid = row[schema.id_col]
            t = _parse_cell(row[schema.time_col], schema.time_col, line_no)
            y = _parse_cell(row[schema.y_col], schema.y_col, line_no)
            x = [_parse_cell(row[c], c, line_no) for c in schema.x_cols]
            z = [_parse_cell(row[c], c, line_no) for c in schema.z_cols]
            g = groups.setdefault(sid, {"t": [], "y": [], "x": x, "z": z})
            g["t"].append(t)
            g["y"].append(y)
            if g["x"] != x:
                raise DataError(
                    f"subject {sid!r}: X covariates vary across rows"
                )
            if g["z"] != z:
                raise DataError(
                    f"subject {sid!r}: Z covariates vary across rows"
                )
    if n_rows == 0:
        raise DataError(f"{path}: no data rows")

    subjects = []
    for sid, g in groups.items():
        times = np.asarray(g["t"])
        uniq = np.unique(times[np.isfinite(times)])
        if uniq.size < np.sum(np.isfinite(times)):
            raise DataError(f"subject {sid!r}: duplicate observation times")
        z = list(g["z"])
        subjects.append(SubjectRecord(sid, times, g["y"], g["x"], z))

    # Synthesize the intercept unless column 1 of Z is already constant 1.
    have_intercept = subjects and all(
        s.z.size > 0 and s.z[0] == 1.0 for s in subjects
    )
    if not have_intercept:
        subjects = [
            SubjectRecord(s.id, s.times, s.responses, s.x, np.r_[1.0, s.z])
            for s in subjects
        ]
    return FunctionalDataset(tuple(subjects))


def save_long_csv(ds: FunctionalDataset, path) -> ColumnSpec:
    """Write a dataset in long format; inverse of :func:`load_long_csv`.

    Numeric text uses 17 significant digits so a round trip reproduces
    every float bit-for-bit.  Returns the schema needed to read it back.
    """
    x_cols = tuple(f"x{k + 1}" for k in range(ds.p))
    z_cols = tuple(f"z{k + 1}" for k in range(ds.q))
    schema = ColumnSpec("id", "time", "y", x_cols, z_cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "y", *x_cols, *z_cols])
        for s in ds.subjects:
            for j in range(s.m):
                writer.writerow(
                    [s.id]
                    + [f"{v:.17g}" for v in (s.times[j], s.responses[j])]
                    + [f"{v:.17g}" for v in s.x]
                    + [f"{v:.17g}" for v in s.z]
                )
    return schema


def validate(ds: FunctionalDataset) -> list[str]:
    """Check every dataset invariant; return violations, never raise.

    Each violation string names the offending subject and the rule
    (finiteness, intercept, duplicate-times, time-domain, covariate-shape).
    """
    out: list[str] = []
    lo, hi = ds.time_domain
    p, q = ds.p, ds.q
    seen_ids: set[str] = set()
    for s in ds.subjects:
        tag = f"subject {s.id!r}"
        if s.id in seen_ids:
            out.append(f"{tag}: duplicate-id: subject id occurs more than once")
        seen_ids.add(s.id)
        for name, arr in (("times", s.times), ("responses", s.responses),
                          ("x", s.x), ("z", s.z)):
            if not np.all(np.isfinite(arr)):
                out.append(f"{tag}: finiteness: non-finite value in {name}")
        if s.x.size != p or s.z.size != q:
            out.append(f"{tag}: covariate-shape: p or q differs from dataset")
        if s.z.size == 0 or s.z[0] != 1.0:
            out.append(f"{tag}: intercept: Z column 1 must equal 1")
        finite_t = s.times[np.isfinite(s.times)]
        if np.unique(finite_t).size < finite_t.size:
            out.append(f"{tag}: duplicate-times: repeated observation time")
        if finite_t.size and (finite_t.min() < lo or finite_t.max() > hi):
            out.append(f"{tag}: time-domain: time outside [{lo}, {hi}]")
    return out


def rescale_time(ds: FunctionalDataset) -> FunctionalDataset:
    """Affinely map times onto [0, 1] (the time kernel is scale sensitive)."""
    lo, hi = ds.time_domain
    span = hi - lo
    if span <= 0:
        raise DataError("cannot rescale: degenerate time domain")
    subjects = tuple(
        SubjectRecord(s.id, (s.times - lo) / span, s.responses, s.x, s.z)
        for s in ds.subjects
    )
    return FunctionalDataset(subjects, (0.0, 1.0))
