"""Datasets: CSV ingestion, z-scoring, k-fold splits and synthetic problems."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exprtree import ExprTree

__all__ = [
    "DataError",
    "Dataset",
    "FoldSplit",
    "load_csv",
    "write_csv",
    "normalize_features",
    "make_folds",
    "fold_view",
    "SYNTHETIC",
    "synthetic_dataset",
    "load_registry",
    "default_registry_path",
    "resolve_dataset",
    "validate_dataset",
    "DATA_ROOT_ENV",
]

DATA_ROOT_ENV = "BTSGP_DATA_ROOT"


class DataError(ValueError):
    """Malformed or unavailable input data."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"{self.name}: features {X.shape} do not match targets {y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError(f"{self.name}: non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n_cases(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.targets[idx], name or self.name)


def _parse_cell(text: str, row: int, col: int, path) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}, column {col}: non-finite value {text!r}")
    return v


def _looks_numeric(cells: Sequence[str]) -> bool:
    try:
        [float(c) for c in cells]
    except ValueError:
        return False
    return True


def load_csv(path, target_column: int | str = -1, header: bool | None = None,
             name: str | None = None) -> Dataset:
    """Read a comma-separated file of reals.

    ``header=None`` treats the first row as a header when any of its cells is
    not a number. ``target_column`` is a column name (needs a header) or an
    index; every other column becomes a feature, in file order.
    Row numbers in error messages are 1-based file lines.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    if header is None:
        header = not _looks_numeric(rows[0])
    names = [c.strip() for c in rows[0]] if header else None
    body = rows[1:] if header else rows
    first_line = 2 if header else 1
    if not body:
        raise DataError(f"{path}: no data rows")
    width = len(body[0])
    if isinstance(target_column, str):
        if names is None:
            raise DataError(f"{path}: target column {target_column!r} given by name but file has no header")
        if target_column not in names:
            raise DataError(f"{path}: no column named {target_column!r}")
        tcol = names.index(target_column)
    else:
        tcol = target_column % width
    if width < 2:
        raise DataError(f"{path}: need at least one feature and a target column")
    data = np.empty((len(body), width))
    for i, row in enumerate(body):
        if len(row) != width:
            raise DataError(f"{path}: row {i + first_line}: expected {width} columns, got {len(row)}")
        for j, cell in enumerate(row):
            data[i, j] = _parse_cell(cell.strip(), i + first_line, j + 1, path)
    keep = [j for j in range(width) if j != tcol]
    return Dataset(data[:, keep], data[:, tcol], name or path.stem)


def write_csv(ds: Dataset, path, header: bool = True) -> None:
    """Write features then target; values are written with ``repr`` so they round-trip."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(ds.n_features)] + ["target"])
        for xr, yv in zip(ds.features.tolist(), ds.targets.tolist()):
            w.writerow([repr(v) for v in xr] + [repr(yv)])


def normalize_features(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset]]:
    """Z-score features with the training set's mean and population std.

    Zero-variance features become all zeros. Targets are left untouched.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    const = std == 0.0
    scale = np.where(const, 1.0, std)

    def apply(ds: Dataset) -> Dataset:
        if ds.n_features != train.n_features:
            raise DataError(f"{ds.name}: {ds.n_features} features, training set has {train.n_features}")
        Z = (ds.features - mean) / scale
        Z[:, const] = 0.0
        return Dataset(Z, ds.targets, ds.name)

    return apply(train), [apply(o) for o in others]


@dataclass(frozen=True)
class FoldSplit:
    fold_assignments: np.ndarray
    seed: int

    @property
    def n_folds(self) -> int:
        return int(self.fold_assignments.max()) + 1


def make_folds(n_cases: int, n_folds: int = 5, seed: int = 0) -> FoldSplit:
    """Random fold labels whose fold sizes differ by at most one."""
    if not 1 <= n_folds <= n_cases:
        raise DataError(f"cannot split {n_cases} cases into {n_folds} folds")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n_cases)
    assign = np.empty(n_cases, dtype=np.int64)
    assign[perm] = np.arange(n_cases) % n_folds
    return FoldSplit(assign, seed)


def fold_view(ds: Dataset, split: FoldSplit, fold_index: int) -> tuple[Dataset, Dataset]:
    """``(train, test)`` with fold ``fold_index`` held out."""
    if len(split.fold_assignments) != ds.n_cases:
        raise DataError("fold split does not match dataset size")
    test = split.fold_assignments == fold_index
    return ds.subset(~test, f"{ds.name}-train"), ds.subset(test, f"{ds.name}-test")


# Synthetic problems: inputs uniform on [-1, 1]. ``expr`` is an exact tree for
# the target, ``fn`` computes it per row with the same operations in the same
# order, so the tree scores MAE 0 on raw (unnormalized) features.


@dataclass(frozen=True)
class SyntheticProblem:
    n_features: int
    expr: str
    fn: Callable[[Sequence[float]], float]

    @property
    def tree(self) -> ExprTree:
        return ExprTree.parse(self.expr)


SYNTHETIC: dict[str, SyntheticProblem] = {
    "poly2": SyntheticProblem(2, "add(mul(x0, x0), x1)", lambda x: x[0] * x[0] + x[1]),
    "poly3": SyntheticProblem(
        3, "sub(add(mul(mul(x0, x0), x0), mul(x1, x2)), x0)",
        lambda x: (x[0] * x[0] * x[0] + x[1] * x[2]) - x[0],
    ),
    "trig": SyntheticProblem(
        2, "add(sin(mul(x0, x1)), cos(x0))",
        lambda x: math.sin(x[0] * x[1]) + math.cos(x[0]),
    ),
    "explog": SyntheticProblem(
        2, "add(exp(x0), log(add(x1, add(1.0, 1.0))))",
        lambda x: math.exp(x[0]) + math.log(x[1] + (1.0 + 1.0)),
    ),
}


def synthetic_dataset(name: str, n_cases: int, seed: int = 0) -> Dataset:
    try:
        problem = SYNTHETIC[name]
    except KeyError:
        raise DataError(f"unknown synthetic dataset {name!r}; known: {sorted(SYNTHETIC)}") from None
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.uniform(-1.0, 1.0, size=(n_cases, problem.n_features))
    y = np.array([problem.fn(row) for row in X.tolist()])
    return Dataset(X, y, name)


def default_registry_path() -> Path:
    return Path(__file__).parent / "configs" / "datasets.json"


def load_registry(path=None) -> dict:
    """Registry JSON: name -> {path, target_column, expected_rows, expected_features}."""
    with open(path or default_registry_path(), encoding="utf-8") as fh:
        reg = json.load(fh)
    for name, entry in reg.items():
        missing = {"path", "target_column", "expected_rows", "expected_features"} - set(entry)
        if missing:
            raise DataError(f"registry entry {name!r} lacks {sorted(missing)}")
    return reg


def validate_dataset(ds: Dataset, entry: dict) -> list[str]:
    """Mismatches between a loaded dataset and its registry entry (empty if fine)."""
    problems = []
    if ds.n_cases != entry["expected_rows"]:
        problems.append(f"{ds.name}: {ds.n_cases} rows, expected {entry['expected_rows']}")
    if ds.n_features != entry["expected_features"]:
        problems.append(f"{ds.name}: {ds.n_features} features, expected {entry['expected_features']}")
    return problems


def resolve_dataset(source: str, registry: dict | None = None, synthetic_cases: int = 600,
                    seed: int = 0, data_root=None) -> Dataset:
    """Load ``source``: a synthetic problem name, a registry name or a CSV path.

    Registry paths are relative to ``data_root`` (default: the
    ``BTSGP_DATA_ROOT`` environment variable, else the working directory).
    """
    if source in SYNTHETIC:
        return synthetic_dataset(source, synthetic_cases, seed)
    registry = load_registry() if registry is None else registry
    if source in registry:
        entry = registry[source]
        root = Path(data_root or os.environ.get(DATA_ROOT_ENV, "."))
        path = Path(entry["path"])
        if not path.is_absolute():
            path = root / path
        if not path.exists():
            raise DataError(
                f"dataset {source!r} not found at {path}; place the CSV there or set {DATA_ROOT_ENV}"
            )
        ds = load_csv(path, entry["target_column"], entry.get("header"), name=source)
        problems = validate_dataset(ds, entry)
        if problems:
            raise DataError("; ".join(problems))
        return ds
    path = Path(source)
    if path.suffix.lower() == ".csv" or path.exists():
        if not path.exists():
            raise DataError(f"{path}: no such file")
        return load_csv(path)
    raise DataError(f"unknown dataset {source!r}")
