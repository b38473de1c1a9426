"""Sample representation, CSV ingestion and cross-fitting fold plans.

A fold plan carries, for each evaluation fold I_k, a nested partition of
its complement into an outer training set (for the exposure/outcome
regressions) and an inner training set (for the univariate kernel
corrections), so the two stages never see the same rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ._rand import rng_from
from .errors import ParameterError, ParseError, SchemaError, ShapeError, SizeError, InputError

__all__ = ["Dataset", "FoldPlan", "load_csv", "make_fold_plan"]


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Observed sample: outcome y, exposure a, covariate matrix l (n x p)."""

    y: np.ndarray
    a: np.ndarray
    l: np.ndarray

    def __post_init__(self):
        y = _frozen(self.y)
        a = _frozen(self.a)
        l = np.array(self.l, dtype=float)
        if l.ndim != 2:
            raise ShapeError(f"covariate matrix must be 2-d, got ndim={l.ndim}")
        l.setflags(write=False)
        if y.ndim != 1 or a.ndim != 1:
            raise ShapeError("y and a must be 1-d vectors")
        n = y.shape[0]
        if a.shape[0] != n or l.shape[0] != n:
            raise ShapeError(
                f"length mismatch: y has {n}, a has {a.shape[0]}, l has {l.shape[0]} rows"
            )
        if n < 2:
            raise SizeError(f"need at least 2 observations, got {n}")
        if l.shape[1] < 1:
            raise ShapeError("need at least one covariate column")
        for name, arr in (("y", y), ("a", a), ("l", l)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"non-finite values in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "l", l)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.l.shape[1]


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint evaluation folds plus, per fold, the nested split of the complement.

    folds[k] indexes I_k; inner_split[k] = (train_outer, train_inner) partitions
    the complement of I_k.
    """

    k: int
    folds: tuple[np.ndarray, ...]
    inner_split: tuple[tuple[np.ndarray, np.ndarray], ...]
    seed: int
    n: int
    inner_fraction: float = field(default=0.5)

    def complement(self, fold_index: int) -> np.ndarray:
        outer, inner = self.inner_split[fold_index]
        return np.sort(np.concatenate([outer, inner]))


def load_csv(path, schema) -> Dataset:
    """Read a sample from a UTF-8 CSV file with a header row.

    `schema` maps roles to column names: {"y": ..., "a": ..., "covariates": [...]}.
    Rows are kept in file order; any missing or non-numeric cell aborts with
    the offending 1-based data row.
    """
    try:
        y_col = schema["y"]
        a_col = schema["a"]
        cov_cols = list(schema["covariates"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"schema must provide 'y', 'a' and 'covariates': {exc}") from exc
    if not cov_cols:
        raise SchemaError("schema lists no covariate columns")

    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        positions = {}
        for col in [y_col, a_col, *cov_cols]:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r} (header: {header})")
            positions[col] = header.index(col)

        wanted = [positions[c] for c in [y_col, a_col, *cov_cols]]
        rows = []
        for i, record in enumerate(reader, start=1):
            values = []
            for pos in wanted:
                if pos >= len(record):
                    raise ParseError(f"{path}: row {i}: too few fields")
                cell = record[pos].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {i}: non-numeric value {cell!r}") from None
                if not math.isfinite(value):
                    raise ParseError(f"{path}: row {i}: non-finite value {cell!r}")
                values.append(value)
            rows.append(values)

    if len(rows) < 2:
        raise SizeError(f"{path}: need at least 2 data rows, got {len(rows)}")
    data = np.asarray(rows, dtype=float)
    return Dataset(y=data[:, 0], a=data[:, 1], l=data[:, 2:])


def make_fold_plan(n: int, k: int, inner_fraction: float = 0.5, seed: int = 0) -> FoldPlan:
    """Randomly partition {0..n-1} into k near-equal folds with nested complement splits.

    Deterministic given `seed`. Fold sizes are floor(n/k) or ceil(n/k), the
    remainder going to the first n mod k folds. Each complement is split into
    (train_outer, train_inner) with the inner share given by `inner_fraction`.
    """
    n = int(n)
    k = int(k)
    if k < 2 or k > n:
        raise ParameterError(f"fold count must satisfy 2 <= k <= n, got k={k}, n={n}")
    if not (0.0 < inner_fraction < 1.0):
        raise ParameterError(f"inner_fraction must be in (0, 1), got {inner_fraction}")
    if inner_fraction * (n - n / k) < 1.0:
        raise ParameterError(
            f"inner_fraction={inner_fraction} leaves no inner training rows at n={n}, k={k}"
        )

    rng = rng_from(seed)
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        folds.append(np.sort(perm[start : start + size]))
        start += size

    all_idx = np.arange(n)
    inner_split = []
    for j in range(k):
        comp = np.setdiff1d(all_idx, folds[j], assume_unique=True)
        m = comp.shape[0]
        shuffled = rng.permutation(comp)
        n_inner = int(round(inner_fraction * m))
        n_inner = min(max(n_inner, 1), m - 1)
        inner = np.sort(shuffled[:n_inner])
        outer = np.sort(shuffled[n_inner:])
        for arr in (inner, outer):
            arr.setflags(write=False)
        inner_split.append((outer, inner))

    for f in folds:
        f.setflags(write=False)
    return FoldPlan(
        k=k,
        folds=tuple(folds),
        inner_split=tuple(inner_split),
        seed=int(seed),
        n=n,
        inner_fraction=float(inner_fraction),
    )
