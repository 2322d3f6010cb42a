"""Data model, CSV ingestion and honest sample splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np

OutcomeKind = Literal["continuous", "binary"]


class DataError(ValueError):
    """Base class for data problems reported to the user."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class DomainError(DataError):
    pass


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Aligned outcome, treatment, instrument and covariate columns.

    Arrays are copied and made read-only on construction so a dataset can be
    shared between workers without defensive copies.
    """

    y: np.ndarray
    w: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = ()
    outcome_kind: OutcomeKind = "continuous"

    def __post_init__(self):
        y = _frozen(self.y)
        w = _frozen(self.w)
        z = _frozen(self.z)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = _frozen(x)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "covariate_names", names)
        self.validate()

    def validate(self) -> None:
        n = self.y.shape[0]
        if n < 1:
            raise DomainError("dataset must contain at least one row")
        if self.y.ndim != 1 or self.w.shape != (n,) or self.z.shape != (n,) or self.x.shape[0] != n:
            raise DomainError(
                f"column lengths differ: y={self.y.shape}, w={self.w.shape}, "
                f"z={self.z.shape}, x={self.x.shape}"
            )
        for name, col in (("w", self.w), ("z", self.z)):
            bad = np.flatnonzero((col != 0) & (col != 1))
            if bad.size:
                raise DomainError(f"{name} must be 0/1; row {bad[0]} has {col[bad[0]]!r}")
        if self.outcome_kind not in ("continuous", "binary"):
            raise DomainError(f"unknown outcome_kind {self.outcome_kind!r}")
        if self.outcome_kind == "binary" and not _is_binary(self.y):
            raise DomainError("binary outcome must contain only 0/1 values")
        if len(self.covariate_names) != self.x.shape[1]:
            raise DomainError(
                f"{len(self.covariate_names)} covariate names for {self.x.shape[1]} columns"
            )
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DomainError("covariate names must be distinct")
        for name, col in (("y", self.y), ("x", self.x)):
            if not np.all(np.isfinite(col)):
                raise DomainError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows],
            w=self.w[rows],
            z=self.z[rows],
            x=self.x[rows],
            covariate_names=self.covariate_names,
            outcome_kind=self.outcome_kind,
        )

    def to_csv(self, path: str | Path, extra: Mapping[str, np.ndarray] | None = None) -> None:
        """Write the dataset (plus optional extra columns) with a header row."""
        cols: dict[str, np.ndarray] = {"y": self.y, "w": self.w, "z": self.z}
        for j, name in enumerate(self.covariate_names):
            cols[name] = self.x[:, j]
        for k, v in (extra or {}).items():
            cols[k] = np.asarray(v)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols.keys())
            for i in range(self.n):
                writer.writerow(_fmt(c[i]) for c in cols.values())


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    f = float(v)
    if f.is_integer() and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


@dataclass(frozen=True)
class ColumnSchema:
    """Maps column roles to header names in a CSV file."""

    outcome: str
    treatment: str
    instrument: str
    covariates: Sequence[str]
    outcome_kind: OutcomeKind | None = None  # None: infer from the data

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise SchemaError("schema must name at least one covariate column")


def load_csv(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read a comma separated file with a header row into a :class:`Dataset`.

    The outcome is treated as binary when every value is 0 or 1, unless
    ``schema.outcome_kind`` says otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        wanted = [schema.outcome, schema.treatment, schema.instrument, *schema.covariates]
        for col in wanted:
            if col not in header:
                raise SchemaError(f"missing column {col!r} in {path}")
        pos = [header.index(c) for c in wanted]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            vals = []
            for col, j in zip(wanted, pos):
                cell = rec[j].strip() if j < len(rec) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"row {lineno}, column {col!r}: cannot parse {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"row {lineno}, column {col!r}: non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    data = np.array(rows, dtype=float)
    for j, col in ((1, schema.treatment), (2, schema.instrument)):
        bad = np.flatnonzero((data[:, j] != 0) & (data[:, j] != 1))
        if bad.size:
            raise DomainError(
                f"row {bad[0] + 2}, column {col!r}: value {data[bad[0], j]:g} outside {{0,1}}"
            )
    kind = schema.outcome_kind or ("binary" if _is_binary(data[:, 0]) else "continuous")
    return Dataset(
        y=data[:, 0],
        w=data[:, 1],
        z=data[:, 2],
        x=data[:, 3:],
        covariate_names=schema.covariates,
        outcome_kind=kind,
    )


@dataclass(frozen=True, eq=False)
class HonestSplit:
    discovery: Dataset
    inference: Dataset
    ratio: float
    seed: int
    discovery_index: np.ndarray = field(repr=False)
    inference_index: np.ndarray = field(repr=False)


def honest_split(d: Dataset, ratio: float = 0.5, seed: int = 0, balance_instrument: bool = False) -> HonestSplit:
    """Randomly split rows into disjoint discovery and inference samples.

    The discovery sample gets ``round(ratio * N)`` rows (Python rounding,
    half to even). With ``balance_instrument`` the permutation is done
    separately within each instrument arm; off by default.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if d.n < 2:
        raise ValueError(f"need at least 2 rows to split, got {d.n}")
    rng = np.random.default_rng(seed)
    if balance_instrument:
        parts = []
        for arm in (0.0, 1.0):
            idx = np.flatnonzero(d.z == arm)
            idx = idx[rng.permutation(idx.size)]
            k = round(ratio * idx.size)
            parts.append((idx[:k], idx[k:]))
        dis = np.concatenate([p[0] for p in parts])
        inf = np.concatenate([p[1] for p in parts])
    else:
        perm = rng.permutation(d.n)
        k = round(ratio * d.n)
        dis, inf = perm[:k], perm[k:]
    if dis.size == 0 or inf.size == 0:
        raise ValueError(f"ratio {ratio} leaves one side of a {d.n}-row split empty")
    dis = np.sort(dis)
    inf = np.sort(inf)
    return HonestSplit(
        discovery=d.subset(dis),
        inference=d.subset(inf),
        ratio=ratio,
        seed=seed,
        discovery_index=_frozen(dis, dtype=np.int64),
        inference_index=_frozen(inf, dtype=np.int64),
    )
