"""Survival dataset container and CSV ingestion.

A dataset is an immutable bundle of covariates, observed times and event
indicators, together with a precomputed time-ascending sort index that the
risk-set sweeps rely on.  Ties are ordered deterministically: earlier time
first, events before censorings at equal times, then original record order.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CsvError


@dataclass(frozen=True)
class Violation:
    """One dataset invariant breach, with a machine-readable code."""

    code: str
    message: str
    row: int | None = None
    column: int | None = None


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored survival data: covariates, observed times, indicators.

    Construction enforces structural consistency (matching lengths, 2-D
    covariates) and builds ``sort_index``; value-level invariants (finite
    entries, status in {0,1}, at least one event) are checked by
    :func:`validate`, which tolerates broken datasets so callers can report
    all problems at once.
    """

    covariates: np.ndarray
    time: np.ndarray
    status: np.ndarray
    sort_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError("covariates must be a 2-D array")
        # column-major: the sweeps stream one covariate column at a time;
        # inputs are copied so freezing never touches caller-owned arrays
        X = np.array(X, order="F", copy=True)
        t = np.array(self.time, dtype=np.float64, copy=True)
        s = np.array(self.status, copy=True)
        if s.dtype.kind == "f" and np.all(np.isfinite(s)) and np.all(s == np.round(s)):
            s = s.astype(np.int8)
        elif s.dtype.kind in "iub":
            s = s.astype(np.int8)
        if t.ndim != 1 or s.ndim != 1:
            raise ValueError("time and status must be 1-D arrays")
        if not (len(t) == len(s) == X.shape[0]):
            raise ValueError(
                f"length mismatch: {X.shape[0]} covariate rows, "
                f"{len(t)} times, {len(s)} status values"
            )
        if len(t) == 0:
            raise ValueError("dataset must contain at least one record")
        # time ascending; events (status=1) before censorings at ties;
        # lexsort is stable, so original order breaks remaining ties.
        order = np.lexsort((1 - (s == 1).astype(np.int8), t))
        for arr in (X, t, s, order):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "status", s)
        object.__setattr__(self, "sort_index", order)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def sorted_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Time-ascending copies of (time, status, covariates), cached.

        The sorted triple is the working representation of every risk-set
        sweep; building it once amortises the row gather across fits and
        probability passes.
        """
        cached = getattr(self, "_sorted_view", None)
        if cached is None:
            order = self.sort_index
            X = np.empty((self.n, self.covariates.shape[1]))
            for j in range(X.shape[1]):
                X[:, j] = self.covariates[:, j][order]
            cached = (self.time[order], self.status[order], X)
            for arr in cached:
                arr.setflags(write=False)
            object.__setattr__(self, "_sorted_view", cached)
        return cached

    @property
    def n_events(self) -> int:
        return int(np.count_nonzero(self.status == 1))

    @property
    def censoring_rate(self) -> float:
        return 1.0 - self.n_events / self.n


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for survival CSV files.

    For headerless files, column names are the 0-based positions as strings
    ("0", "1", ...).
    """

    time_column: str = "time"
    status_column: str = "status"
    covariate_columns: tuple[str, ...] | None = None
    delimiter: str = ","
    has_header: bool = True

    def __post_init__(self):
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")
        if self.covariate_columns is not None:
            if len(self.covariate_columns) == 0:
                raise ValueError("covariate column list must be non-empty")
            names = [self.time_column, self.status_column, *self.covariate_columns]
            if len(set(names)) != len(names):
                raise ValueError("schema column names must be distinct")
            object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))


def validate(ds: SurvivalDataset) -> list[Violation]:
    """Check all value-level invariants; empty list means the dataset is sound."""
    out: list[Violation] = []
    bad_t = ~np.isfinite(ds.time)
    for i in np.flatnonzero(bad_t):
        out.append(Violation("nonfinite_time", f"time at row {i} is not finite", row=int(i)))
    neg_t = np.isfinite(ds.time) & (ds.time < 0)
    for i in np.flatnonzero(neg_t):
        out.append(Violation("negative_time", f"time at row {i} is negative", row=int(i)))
    bad_s = ~np.isin(ds.status, (0, 1))
    for i in np.flatnonzero(bad_s):
        out.append(
            Violation("bad_status", f"status at row {i} is {ds.status[i]!r}, expected 0 or 1", row=int(i))
        )
    bad_x = ~np.isfinite(ds.covariates)
    if bad_x.any():
        for i, j in zip(*np.nonzero(bad_x)):
            out.append(
                Violation(
                    "nonfinite_covariate",
                    f"covariate ({i},{j}) is not finite",
                    row=int(i),
                    column=int(j),
                )
            )
    if not np.any(ds.status == 1):
        out.append(Violation("no_events", "dataset has no events; partial likelihood is degenerate"))
    # defensive: these hold by construction
    order = ds.sort_index
    if sorted(order.tolist()) != list(range(ds.n)):
        out.append(Violation("bad_sort_index", "sort_index is not a permutation"))
    elif np.any(np.diff(ds.time[order]) < 0):
        out.append(Violation("bad_sort_index", "sort_index does not order time ascending"))
    return out


def _resolve_columns(header: list[str], schema: CsvSchema) -> tuple[int, int, list[int], list[str]]:
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise CsvError(f"duplicate column names in header: {dupes}")
    lookup = {name: k for k, name in enumerate(header)}
    for name in (schema.time_column, schema.status_column):
        if name not in lookup:
            raise CsvError(f"column {name!r} not found in header {header!r}")
    if schema.covariate_columns is None:
        cov_names = [c for c in header if c not in (schema.time_column, schema.status_column)]
        if not cov_names:
            raise CsvError("no covariate columns left after time/status")
    else:
        cov_names = list(schema.covariate_columns)
        for name in cov_names:
            if name not in lookup:
                raise CsvError(f"covariate column {name!r} not found in header {header!r}")
    return lookup[schema.time_column], lookup[schema.status_column], [lookup[c] for c in cov_names], cov_names


def load_csv(path: str | os.PathLike, schema: CsvSchema | None = None) -> SurvivalDataset:
    """Read a survival dataset from an RFC-4180-style CSV file.

    Row order of the file is preserved in storage order.  Every malformed
    cell is reported with its 1-based data-row number.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            first = next(reader)
        except StopIteration:
            raise CsvError(f"{path}: file is empty") from None
        if schema.has_header:
            header = [h.strip() for h in first]
            rows = list(reader)
        else:
            header = [str(k) for k in range(len(first))]
            rows = [first, *reader]
    t_col, s_col, x_cols, _ = _resolve_columns(header, schema)
    if not rows:
        raise CsvError(f"{path}: no data rows")

    width = len(header)
    for r, row in enumerate(rows, start=1):
        if len(row) != width:
            raise CsvError(f"row {r}: expected {width} fields, got {len(row)}", row=r)

    def column(col: int, name: str) -> np.ndarray:
        vals = np.empty(len(rows))
        for r, row in enumerate(rows, start=1):
            try:
                vals[r - 1] = float(row[col])
            except ValueError:
                raise CsvError(
                    f"row {r}, column {name!r}: non-numeric value {row[col]!r}",
                    row=r,
                    column=col,
                ) from None
        return vals

    time = column(t_col, schema.time_column)
    status = column(s_col, schema.status_column)
    X = np.column_stack([column(c, header[c]) for c in x_cols])

    bad = ~np.isin(status, (0.0, 1.0))
    if bad.any():
        r = int(np.flatnonzero(bad)[0]) + 1
        raise CsvError(f"row {r}: status must be 0 or 1, got {status[r - 1]!r}", row=r)
    bad = ~np.isfinite(time) | (time < 0)
    if bad.any():
        r = int(np.flatnonzero(bad)[0]) + 1
        raise CsvError(f"row {r}: time must be a finite nonnegative number, got {time[r - 1]!r}", row=r)
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = (int(a[0]) for a in np.nonzero(bad))
        raise CsvError(f"row {i + 1}: covariate {header[x_cols[j]]!r} is not finite", row=i + 1, column=j)

    return SurvivalDataset(covariates=X, time=time, status=status.astype(np.int8))


def write_csv(ds: SurvivalDataset, path: str | os.PathLike, schema: CsvSchema | None = None) -> None:
    """Write a dataset as CSV; floats use shortest round-trip formatting."""
    schema = schema or CsvSchema()
    if schema.covariate_columns is None:
        cov_names = [f"x{j + 1}" for j in range(ds.p)]
    else:
        cov_names = list(schema.covariate_columns)
        if len(cov_names) != ds.p:
            raise ValueError(f"schema names {len(cov_names)} columns, dataset has {ds.p}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        if schema.has_header:
            writer.writerow([schema.time_column, schema.status_column, *cov_names])
        for i in range(ds.n):
            writer.writerow(
                [repr(float(ds.time[i])), int(ds.status[i]), *(repr(float(v)) for v in ds.covariates[i])]
            )


