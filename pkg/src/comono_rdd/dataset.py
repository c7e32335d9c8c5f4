"""The (Y, D, X) sample: CSV I/O, validation, standardization and the group split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateCovariate,
    EmptyGroup,
    MissingColumn,
    NonBinaryTreatment,
    NonNumericCell,
)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcomes ``y``, binary treatments ``d`` and an ``n x k`` covariate matrix ``x``.

    Arrays are copied and made read-only on construction so a dataset can be
    shared between workers.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        d_raw = np.array(self.d, dtype=float).ravel()
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise DataError("covariate matrix must be n x k with k >= 1")
        n = y.shape[0]
        if d_raw.shape[0] != n or x.shape[0] != n:
            raise DataError(f"length mismatch: y={n}, d={d_raw.shape[0]}, x={x.shape[0]}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("outcomes and covariates must be finite")
        bad = np.flatnonzero((d_raw != 0.0) & (d_raw != 1.0))
        if bad.size:
            raise NonBinaryTreatment(int(bad[0]), float(d_raw[bad[0]]))
        d = d_raw.astype(np.int8)
        for g in (0, 1):
            if not np.any(d == g):
                raise EmptyGroup(g)
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} names for {x.shape[1]} covariates")
        for a in (y, d, x):
            a.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MissingColumn(name) from None

    def swap_labels(self) -> "Dataset":
        """Same sample with treatment labels flipped (d -> 1 - d)."""
        return Dataset(self.y, 1 - self.d, self.x, self.names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.d[idx], self.x[idx], self.names)


@dataclass(frozen=True)
class Standardization:
    means: np.ndarray
    scales: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.means) / self.scales

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.scales + self.means

    @classmethod
    def identity(cls, k: int) -> "Standardization":
        return cls(np.zeros(k), np.ones(k))


def standardize(ds: Dataset) -> tuple[Dataset, Standardization]:
    """Rescale every covariate to mean 0 and unit standard deviation (ddof=0)."""
    means = ds.x.mean(axis=0)
    scales = ds.x.std(axis=0)
    for j, s in enumerate(scales):
        if not s > 0 or np.ptp(ds.x[:, j]) == 0:
            raise DegenerateCovariate(ds.names[j])
    tr = Standardization(means, scales)
    return Dataset(ds.y, ds.d, tr.apply(ds.x), ds.names), tr


def partition(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Index sets ``(I1, I0)`` of treated and untreated rows, in row order."""
    return np.flatnonzero(ds.d == 1), np.flatnonzero(ds.d == 0)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise NonNumericCell(row, col, text) from None
    if not math.isfinite(v):
        raise NonNumericCell(row, col, text)
    return v


def load_csv(
    path,
    y_col: str = "y",
    d_col: str = "d",
    x_cols: Sequence[str] | None = None,
) -> Dataset:
    """Read a dataset from a headed CSV file.

    ``x_cols`` defaults to every column other than ``y_col`` and ``d_col``.
    Rows are numbered from 1 (the first data row) in error messages. Empty
    designated cells are an error; nothing is dropped silently.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if x_cols is None:
            x_cols = [h for h in header if h not in (y_col, d_col)]
        x_cols = list(x_cols)
        if not x_cols:
            raise DataError("no covariate columns")
        pos = {}
        for name in [y_col, d_col, *x_cols]:
            if name not in header:
                raise MissingColumn(name)
            pos[name] = header.index(name)
        ys, ds, xs = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            ys.append(_parse_float(row[pos[y_col]].strip(), rownum, y_col))
            dv = _parse_float(row[pos[d_col]].strip(), rownum, d_col)
            if dv not in (0.0, 1.0):
                raise NonBinaryTreatment(rownum, dv)
            ds.append(dv)
            xs.append([_parse_float(row[pos[c]].strip(), rownum, c) for c in x_cols])
    if not ys:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(ys), np.array(ds), np.array(xs).reshape(len(ys), len(x_cols)), tuple(x_cols))


def write_csv(ds: Dataset, path, y_col: str = "y", d_col: str = "d") -> None:
    """Write ``ds`` with round-trip float formatting."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([y_col, d_col, *ds.names])
        for i in range(ds.n):
            w.writerow([repr(float(ds.y[i])), int(ds.d[i]), *(repr(float(v)) for v in ds.x[i])])
