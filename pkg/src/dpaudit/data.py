"""Dataset ingestion, preprocessing, diagnostics and synthetic data."""
from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
import os
from collections.abc import Mapping

import numpy as np

from dpaudit.core import Dataset, as_rng

DATASET_SCHEMA = "dpaudit-dataset/1"


class DataError(ValueError):
    """Malformed input data."""


class Normalize(str, enum.Enum):
    NONE = "none"
    MINMAX01 = "minmax01"
    STANDARDIZE = "standardize"


@dataclasses.dataclass(frozen=True)
class RawTable:
    """Column-typed table as read from disk.

    Numeric columns hold float arrays, categorical columns hold arrays of
    strings. ``kinds`` maps each column name to "numeric" or "categorical".
    """

    columns: Mapping[str, np.ndarray]
    kinds: Mapping[str, str]
    label_column: str
    source: str = "<memory>"

    def __post_init__(self):
        if self.label_column not in self.columns:
            raise DataError(f"{self.source}: no label column {self.label_column!r}")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) != 1:
            raise DataError(f"{self.source}: columns have unequal lengths")

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.label_column])

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.columns if c != self.label_column]


def _parse_float(s: str):
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(path: str | os.PathLike, label_column: str) -> RawTable:
    """Reads a UTF-8 CSV with a header row.

    Columns whose every value parses as a finite float are numeric; the
    rest are categorical. Blank fields and ragged rows are rejected with
    the offending line number.
    """
    path = os.fspath(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if not header or all(_parse_float(h) is not None for h in header) or any(not h for h in header):
            raise DataError(f"{path}: missing or malformed header row")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            fields = [f.strip() for f in row]
            for name, f in zip(header, fields):
                if f == "":
                    raise DataError(f"{path}:{line}: missing value in column {name!r}")
            rows.append(fields)
    if not rows:
        raise DataError(f"{path}: no data rows")
    columns, kinds = {}, {}
    for j, name in enumerate(header):
        raw = [r[j] for r in rows]
        parsed = [_parse_float(v) for v in raw]
        if all(p is not None for p in parsed):
            columns[name] = np.asarray(parsed, dtype=float)
            kinds[name] = "numeric"
        else:
            columns[name] = np.asarray(raw, dtype=object)
            kinds[name] = "categorical"
    return RawTable(columns, kinds, label_column, path)


@dataclasses.dataclass(frozen=True)
class PreprocessSpec:
    """Preprocessing knobs.

    Attributes:
      max_rows: rows kept after the binary restriction (uniform subsample).
      normalize: per-column normalization of numeric features.
      drop_categorical_for_rf: drop one-hot columns entirely, for forests
        that only split on numeric features.
      subsample_seed: seed for the subsample.
    """

    max_rows: int = 1000
    normalize: Normalize = Normalize.MINMAX01
    drop_categorical_for_rf: bool = False
    subsample_seed: int = 0

    def __post_init__(self):
        if self.max_rows < 2:
            raise ValueError("max_rows must be >= 2")
        object.__setattr__(self, "normalize", Normalize(self.normalize))


def _binarize_labels(values: np.ndarray, source: str) -> tuple[np.ndarray, np.ndarray]:
    """Returns (keep mask, 0/1 labels for kept rows)."""
    if values.dtype != object:
        keep = (values == 0) | (values == 1)
        return keep, values[keep].astype(np.int64)
    uniq = sorted(set(values.tolist()))
    if "0" in uniq and "1" in uniq:
        keep = (values == "0") | (values == "1")
        return keep, (values[keep] == "1").astype(np.int64)
    if len(uniq) < 2:
        raise DataError(f"{source}: label column has a single class")
    first, second = uniq[0], uniq[1]
    keep = (values == first) | (values == second)
    return keep, (values[keep] == second).astype(np.int64)


def _normalize_columns(x: np.ndarray, mode: Normalize) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalizes columns; returns (values, fixed bounds or None)."""
    x = x.copy()
    if mode is Normalize.MINMAX01:
        lo, hi = x.min(axis=0), x.max(axis=0)
        for j in range(x.shape[1]):
            if lo[j] == 0.0 and hi[j] == 1.0:
                continue
            span = hi[j] - lo[j]
            x[:, j] = (x[:, j] - lo[j]) / span if span > 0 else 0.0
        x = np.clip(x, 0.0, 1.0)
        return x, np.tile([0.0, 1.0], (x.shape[1], 1))
    if mode is Normalize.STANDARDIZE:
        for j in range(x.shape[1]):
            mu, sd = x[:, j].mean(), x[:, j].std()
            if abs(mu) < 1e-12 and abs(sd - 1.0) < 1e-12:
                continue
            x[:, j] = (x[:, j] - mu) / sd if sd > 0 else 0.0
    return x, None


def preprocess(table: RawTable | Dataset, spec: PreprocessSpec = PreprocessSpec()) -> Dataset:
    """Turns a raw table (or an existing dataset) into an audit-ready Dataset.

    Keeps labels 0 and 1 only, subsamples to ``max_rows``, one-hot encodes
    categorical columns and normalizes numeric ones. Bounds and the L2
    radius are computed from the processed rows. Applying it again to its
    own output with the same spec returns an identical dataset.
    """
    if isinstance(table, Dataset):
        x, y = np.array(table.features), np.array(table.labels)
        cat = np.asarray(table.categorical, dtype=bool)
        names = list(table.feature_names)
        source = "<dataset>"
    else:
        source = table.source
        keep, y = _binarize_labels(table.columns[table.label_column], source)
        blocks, cat_flags, names = [], [], []
        for name in table.feature_columns:
            col = table.columns[name][keep]
            if table.kinds[name] == "numeric":
                blocks.append(col.astype(float)[:, None])
                cat_flags.append(False)
                names.append(name)
            else:
                levels = sorted(set(col.tolist()))
                blocks.append(np.stack([(col == lv).astype(float) for lv in levels], axis=1))
                cat_flags.extend([True] * len(levels))
                names.extend(f"{name}={lv}" for lv in levels)
        if not blocks:
            raise DataError(f"{source}: no feature columns")
        x = np.concatenate(blocks, axis=1)
        cat = np.asarray(cat_flags, dtype=bool)
    if len(np.unique(y)) < 2:
        raise DataError(f"{source}: only one class left after restricting to labels 0/1")
    if len(y) > spec.max_rows:
        idx = np.sort(as_rng(spec.subsample_seed).choice(len(y), spec.max_rows, replace=False))
        x, y = x[idx], y[idx]
        if len(np.unique(y)) < 2:
            raise DataError(f"{source}: subsample contains a single class")
    if spec.drop_categorical_for_rf and cat.any():
        x, names, cat = x[:, ~cat], [n for n, c in zip(names, cat) if not c], cat[~cat]
        if x.shape[1] == 0:
            raise DataError(f"{source}: no numeric features left for the forest")
    num = ~cat
    fixed = None
    if num.any():
        x[:, num], fixed = _normalize_columns(x[:, num], spec.normalize)
    lo, hi = x.min(axis=0), x.max(axis=0)
    bounds = np.stack([lo, hi], axis=1)
    if fixed is not None:
        bounds[num] = fixed
    bounds[cat] = [0.0, 1.0]
    radius = float(np.max(np.linalg.norm(x, axis=1)))
    return Dataset(x, y, bounds, radius, tuple(cat.tolist()), tuple(names))


def nonsphericity(data: Dataset) -> float:
    """Largest over smallest singular value of the centred feature matrix."""
    x = data.features - data.features.mean(axis=0)
    s = np.linalg.svd(x, compute_uv=False)
    if s[-1] < 1e-12 or x.shape[0] <= x.shape[1]:
        return math.inf
    return float(s[0] / s[-1])


def synth_blobs(n: int, d: int, separation: float, seed, scales=None) -> Dataset:
    """Two Gaussian clusters for desk-scale audits.

    Class means sit at -separation/2 and +separation/2 along the diagonal
    direction (1, ..., 1)/sqrt(d); noise is unit Gaussian per axis,
    multiplied by ``scales`` when given (this is how non-spherical data is
    produced). Labels alternate 0, 1, 0, ... so both classes have n/2 rows.
    """
    if n < 4 or d < 1:
        raise ValueError("synth_blobs needs n >= 4 and d >= 1")
    rng = as_rng(seed)
    y = np.arange(n) % 2
    direction = np.full(d, 1.0 / math.sqrt(d))
    centers = np.outer(np.where(y == 1, 0.5, -0.5) * separation, direction)
    s = np.ones(d) if scales is None else np.asarray(scales, dtype=float)
    if s.shape != (d,):
        raise ValueError("scales must have length d")
    x = centers + rng.standard_normal((n, d)) * s
    return Dataset.from_arrays(x, y)


def save_dataset(data: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data.to_json_dict(), fh)


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        return Dataset.from_json_dict(obj)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{os.fspath(path)}: malformed dataset snapshot ({exc})") from exc
