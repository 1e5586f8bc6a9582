"""Two-sample data model, CSV ingestion and stratified fold partitioning.

A :class:`Dataset` pools an experimental sample (``g == 1``, outcome missing)
and an observational sample (``g == 0``, outcome observed).  Columns are held
as numpy arrays; the missing outcome is stored as ``nan``.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "ParseError",
    "SchemaViolation",
    "ValidationError",
    "Unit",
    "Dataset",
    "FoldPlan",
    "Schema",
    "load_dataset",
    "write_dataset",
    "make_folds",
    "check_tau",
    "CELLS",
]

MISSING_TOKENS = ("", "NA")
CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


class DataError(ValueError):
    """Base class for input problems (exit status 2 on the command line)."""


class ParseError(DataError):
    pass


class SchemaViolation(DataError):
    pass


class ValidationError(DataError):
    pass


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"quantile level must lie in (0, 1), got {tau!r}")
    return tau


@dataclass(frozen=True)
class Unit:
    g: int
    t: int
    x: tuple[float, ...]
    s: tuple[float, ...]
    y: float | None = None

    def __post_init__(self):
        if self.g not in (0, 1) or self.t not in (0, 1):
            raise ValidationError(f"g and t must be 0/1, got g={self.g!r} t={self.t!r}")
        if (self.y is None) != (self.g == 1):
            raise SchemaViolation("y must be present exactly when g == 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of pooled units.

    Parameters
    ----------
    g, t : (n,) int arrays
        Sample indicator (1 = experimental) and treatment.
    x : (n, d_x) float array
    s : (n, d_s) float array
    y : (n,) float array, ``nan`` where ``g == 1``
    """

    g: np.ndarray
    t: np.ndarray
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    x_names: tuple[str, ...] = ()
    s_names: tuple[str, ...] = ()

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.int64).ravel()
        t = np.asarray(self.t, dtype=np.int64).ravel()
        x = np.asarray(self.x, dtype=float)
        s = np.asarray(self.s, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        n = g.shape[0]
        if x.ndim == 1:
            x = x[:, None]
        if s.ndim == 1:
            s = s[:, None]
        if not (t.shape[0] == x.shape[0] == s.shape[0] == y.shape[0] == n):
            raise ValidationError("all columns must have the same length")
        if not (np.isin(g, (0, 1)).all() and np.isin(t, (0, 1)).all()):
            raise ValidationError("g and t must be coded 0/1")
        if not (np.isfinite(x).all() and np.isfinite(s).all()):
            raise ValidationError("covariates and surrogates must be finite")
        obs = g == 0
        if np.isnan(y[obs]).any() or not np.isfinite(y[obs]).all():
            row = int(np.flatnonzero(obs & ~np.isfinite(y))[0])
            raise SchemaViolation(f"unit {row}: observational unit (g=0) is missing y")
        if not np.isnan(y[~obs]).all():
            row = int(np.flatnonzero(~obs & ~np.isnan(y))[0])
            raise SchemaViolation(f"unit {row}: experimental unit (g=1) carries a y value")
        for gg, tt in CELLS:
            if not np.any((g == gg) & (t == tt)):
                raise ValidationError(f"cell (g={gg}, t={tt}) is empty")
        for arr in (g, t, x, s, y):
            arr.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "y", y)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))
        if not self.s_names:
            object.__setattr__(self, "s_names", tuple(f"s{j + 1}" for j in range(s.shape[1])))

    @classmethod
    def from_units(cls, units: Iterable[Unit]) -> "Dataset":
        units = list(units)
        if not units:
            raise ValidationError("no units")
        dx, ds = len(units[0].x), len(units[0].s)
        if any(len(u.x) != dx or len(u.s) != ds for u in units):
            raise ValidationError("inconsistent x or s dimension across units")
        return cls(
            g=[u.g for u in units],
            t=[u.t for u in units],
            x=np.array([u.x for u in units], dtype=float).reshape(len(units), dx),
            s=np.array([u.s for u in units], dtype=float).reshape(len(units), ds),
            y=[math.nan if u.y is None else u.y for u in units],
        )

    def units(self) -> Iterator[Unit]:
        for i in range(self.n):
            yield Unit(
                g=int(self.g[i]),
                t=int(self.t[i]),
                x=tuple(float(v) for v in self.x[i]),
                s=tuple(float(v) for v in self.s[i]),
                y=None if self.g[i] == 1 else float(self.y[i]),
            )

    @property
    def n(self) -> int:
        return int(self.g.shape[0])

    @property
    def n0(self) -> int:
        return int(np.sum(self.g == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.g == 1))

    @property
    def d_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def d_s(self) -> int:
        return int(self.s.shape[1])

    @property
    def nu_hat(self) -> float:
        """Plug-in share of experimental units, ``n1 / (n0 + n1)``."""
        return self.n1 / self.n

    def cell(self, g: int, t: int) -> np.ndarray:
        return np.flatnonzero((self.g == g) & (self.t == t))

    def cell_sizes(self) -> dict[tuple[int, int], int]:
        return {c: int(self.cell(*c).size) for c in CELLS}

    def outcome_range(self) -> tuple[float, float]:
        yo = self.y[self.g == 0]
        return float(yo.min()), float(yo.max())

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.g, other.g)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )


@dataclass(frozen=True)
class Schema:
    """Column-name mapping. Empty ``x``/``s`` means infer ``x1..``/``s1..`` from the header."""

    g: str = "g"
    t: str = "t"
    y: str = "y"
    x: tuple[str, ...] = ()
    s: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str | Sequence[str]] | None) -> "Schema":
        if not mapping:
            return cls()
        unknown = set(mapping) - {"g", "t", "y", "x", "s"}
        if unknown:
            raise ValidationError(f"unknown schema keys: {sorted(unknown)}")
        kw = {}
        for key, val in mapping.items():
            if key in ("x", "s"):
                if isinstance(val, str):
                    val = [v for v in val.split(",") if v]
                kw[key] = tuple(val)
            else:
                kw[key] = str(val)
        return cls(**kw)

    def resolve(self, header: Sequence[str]) -> "Schema":
        def numbered(prefix):
            cols = []
            j = 1
            while f"{prefix}{j}" in header:
                cols.append(f"{prefix}{j}")
                j += 1
            return tuple(cols)

        x = self.x or numbered("x")
        s = self.s or numbered("s")
        if not x:
            raise SchemaViolation("no covariate columns found (expected x1, x2, ...)")
        if not s:
            raise SchemaViolation("no surrogate columns found (expected s1, s2, ...)")
        missing = [c for c in (self.g, self.t, self.y, *x, *s) if c not in header]
        if missing:
            raise SchemaViolation(f"columns not found in header: {missing}")
        return Schema(g=self.g, t=self.t, y=self.y, x=x, s=s)


def _parse_binary(tok: str, col: str, row: int) -> int:
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r}: cannot parse {tok!r}") from None
    if val not in (0.0, 1.0):
        raise ParseError(f"row {row}: column {col!r}: expected 0 or 1, got {tok!r}")
    return int(val)


def _parse_real(tok: str, col: str, row: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"row {row}: column {col!r}: cannot parse {tok!r}") from None
    if not math.isfinite(val):
        raise ParseError(f"row {row}: column {col!r}: non-finite value {tok!r}")
    return val


def load_dataset(path: str | os.PathLike, schema: Schema | Mapping | None = None) -> Dataset:
    """Read a UTF-8, comma-delimited CSV with a header row.

    Row numbers in error messages count the header as row 1.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file: header row required") from None
        header = [h.strip() for h in header]
        sch = schema.resolve(header)
        pos = {name: j for j, name in enumerate(header)}
        g, t, x, s, y = [], [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            row = [c.strip() for c in row]
            gi = _parse_binary(row[pos[sch.g]], sch.g, row_no)
            ti = _parse_binary(row[pos[sch.t]], sch.t, row_no)
            xi = [_parse_real(row[pos[c]], c, row_no) for c in sch.x]
            si = [_parse_real(row[pos[c]], c, row_no) for c in sch.s]
            ytok = row[pos[sch.y]]
            if ytok in MISSING_TOKENS:
                if gi == 0:
                    raise SchemaViolation(f"row {row_no}: observational unit (g=0) is missing {sch.y!r}")
                yi = math.nan
            else:
                if gi == 1:
                    raise SchemaViolation(f"row {row_no}: experimental unit (g=1) carries {sch.y!r}={ytok!r}")
                yi = _parse_real(ytok, sch.y, row_no)
            g.append(gi)
            t.append(ti)
            x.append(xi)
            s.append(si)
            y.append(yi)
    if not g:
        raise ValidationError("no data rows")
    return Dataset(
        g=g,
        t=t,
        x=np.array(x, dtype=float),
        s=np.array(s, dtype=float),
        y=y,
        x_names=sch.x,
        s_names=sch.s,
    )


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``dataset`` as CSV; missing outcomes are written as ``NA``.

    Floats use ``repr`` so reloading reproduces them bitwise.
    """
    header = ["g", "t", *dataset.x_names, *dataset.s_names, "y"]
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            yv = "NA" if dataset.g[i] == 1 else repr(float(dataset.y[i]))
            w.writerow(
                [int(dataset.g[i]), int(dataset.t[i])]
                + [repr(float(v)) for v in dataset.x[i]]
                + [repr(float(v)) for v in dataset.s[i]]
                + [yv]
            )
    os.replace(tmp, path)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int
    requested_k: int = field(default=0)

    def fold(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def complement(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def make_folds(dataset: Dataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified K-fold partition within each (g, t) cell.

    If the smallest cell has ``m < k`` units, ``k`` drops to ``max(2, m)``
    with a warning.  A cell with fewer than two units cannot be cross-fitted.
    """
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    sizes = dataset.cell_sizes()
    smallest = min(sizes.values())
    if smallest == 0:
        empty = [c for c, m in sizes.items() if m == 0]
        raise ValidationError(f"cell (g={empty[0][0]}, t={empty[0][1]}) is empty")
    if smallest < 2:
        raise ValidationError("every (g, t) cell needs at least 2 units for cross-fitting")
    requested = k
    if smallest < k:
        k = max(2, smallest)
        warnings.warn(
            f"smallest (g, t) cell has {smallest} units; reducing folds from {requested} to {k}",
            RuntimeWarning,
            stacklevel=2,
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x51F0])))
    assignment = np.empty(dataset.n, dtype=np.int64)
    offset = 0
    for cell in CELLS:
        idx = dataset.cell(*cell)
        perm = rng.permutation(idx)
        # rotating the start keeps total fold sizes balanced as well
        assignment[perm] = (np.arange(perm.size) + offset) % k
        offset += perm.size
    assignment.setflags(write=False)
    return FoldPlan(k=k, assignment=assignment, seed=seed, requested_k=requested)
