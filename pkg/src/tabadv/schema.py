"""Tabular data model, ingestion and generic preprocessing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

KINDS = ("continuous", "integer", "categorical", "binary")


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """One column of a tabular dataset.

    ``dependent`` features are never perturbed directly; the constraint
    engine recomputes them from the other features.
    """

    name: str
    kind: str = "continuous"
    min: float = -math.inf
    max: float = math.inf
    mutable: bool = True
    dependent: bool = False
    cardinality: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "binary":
            if (self.min, self.max) != (0, 1):
                raise SchemaError(f"feature {self.name!r}: binary range must be [0, 1]")
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 2:
                raise SchemaError(f"feature {self.name!r}: categorical needs cardinality >= 2")
            if (self.min, self.max) != (0, self.cardinality - 1):
                raise SchemaError(
                    f"feature {self.name!r}: categorical range must be [0, {self.cardinality - 1}]"
                )
        if not self.min <= self.max:
            raise SchemaError(f"feature {self.name!r}: min > max")

    @property
    def discrete(self) -> bool:
        return self.kind != "continuous"

    @property
    def editable(self) -> bool:
        """Directly perturbable by an attacker."""
        return self.mutable and not self.dependent


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    label_name: str = "label"
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if self.label_name in names:
            raise SchemaError("label name collides with a feature name")
        if self.n_classes < 2:
            raise SchemaError("n_classes must be >= 2")
        if not any(f.editable for f in self.features):
            raise SchemaError("at least one feature must be mutable and non-dependent")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def n_features(self) -> int:
        return len(self.features)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    @property
    def immutable_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if not f.mutable and not f.dependent]

    @property
    def dependent_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.dependent]

    @property
    def editable_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.editable]

    @property
    def lower(self) -> np.ndarray:
        return np.array([f.min for f in self.features], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([f.max for f in self.features], dtype=float)

    def subset(self, keep: list[int]) -> "Schema":
        return Schema(tuple(self.features[i] for i in keep), self.label_name, self.n_classes)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            d = {
                "name": f.name,
                "kind": f.kind,
                "min": f.min,
                "max": f.max,
                "mutable": f.mutable,
                "dependent": f.dependent,
            }
            if f.kind == "categorical":
                d["cardinality"] = f.cardinality
            feats.append(d)
        return {"label_name": self.label_name, "n_classes": self.n_classes, "features": feats}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            feats = []
            for fd in d["features"]:
                kind = fd.get("kind", "continuous")
                card = fd.get("cardinality")
                lo, hi = fd.get("min"), fd.get("max")
                if kind == "binary":
                    lo = 0 if lo is None else lo
                    hi = 1 if hi is None else hi
                if kind == "categorical" and card is not None:
                    lo = 0 if lo is None else lo
                    hi = card - 1 if hi is None else hi
                feats.append(
                    FeatureSpec(
                        name=str(fd["name"]),
                        kind=kind,
                        min=-math.inf if lo is None else float(lo),
                        max=math.inf if hi is None else float(hi),
                        mutable=bool(fd.get("mutable", True)),
                        dependent=bool(fd.get("dependent", False)),
                        cardinality=None if card is None else int(card),
                    )
                )
            return cls(tuple(feats), str(d.get("label_name", "label")), int(d.get("n_classes", 2)))
        except KeyError as exc:
            raise SchemaError(f"schema is missing key {exc}") from None


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_dict(yaml.safe_load(fh))


def save_schema(schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(schema.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class Dataset:
    schema: Schema
    rows: np.ndarray
    labels: np.ndarray
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if rows.ndim != 2 or rows.shape[1] != self.schema.n_features:
            raise DataError(f"rows must have shape (n, {self.schema.n_features})")
        if labels.shape != (rows.shape[0],):
            raise DataError("labels must align with rows")
        rows.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        if self.validate:
            check_rows(self.schema, rows)
            if labels.size and (labels.min() < 0 or labels.max() >= self.schema.n_classes):
                raise DataError("label out of range")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.schema, self.rows[idx], self.labels[idx], validate=False)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.schema.n_classes)


def check_rows(schema: Schema, rows: np.ndarray) -> None:
    """Raise DataError if any value breaks its FeatureSpec."""
    if not np.all(np.isfinite(rows)):
        raise DataError("missing or non-finite value")
    for j, f in enumerate(schema.features):
        col = rows[:, j]
        if f.discrete and np.any(col != np.round(col)):
            bad = col[col != np.round(col)][0]
            raise DataError(f"non-integral value in column {f.name!r}: {bad}")
        if np.any(col < f.min) or np.any(col > f.max):
            bad = col[(col < f.min) | (col > f.max)][0]
            raise DataError(f"value out of range in column {f.name!r}: {bad}")


def load_csv(path, schema: Schema) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        wanted = schema.names + [schema.label_name]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        cols = [header.index(c) for c in wanted]
        values = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                values.append([float(rec[c]) for c in cols])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: unparsable or missing value") from None
    if not values:
        raise DataError(f"{path}: empty file")
    arr = np.array(values, dtype=np.float64)
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)):
        raise DataError(f"{path}: non-integral value in label column")
    return Dataset(schema, arr[:, :-1], labels.astype(np.int64))


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ds.schema.names + [ds.schema.label_name])
        for row, lab in zip(ds.rows, ds.labels):
            w.writerow([_fmt(v, f) for v, f in zip(row, ds.schema.features)] + [int(lab)])


def _fmt(v: float, f: FeatureSpec) -> str:
    if f.discrete:
        return str(int(v))
    return repr(float(v))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("length mismatch")
    if x.size < 2:
        raise ValueError("need at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def correlation_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise |Pearson| helper; zero-variance columns correlate with nothing."""
    rows = np.asarray(rows, dtype=np.float64)
    d = rows.shape[1]
    out = np.eye(d)
    for i in range(d):
        for j in range(i + 1, d):
            try:
                r = pearson(rows[:, i], rows[:, j])
            except ValueError:
                r = 0.0
            out[i, j] = out[j, i] = r
    return out


def drop_correlated(ds: Dataset, threshold: float = 0.9, seed: int = 0):
    """Keep one randomly chosen feature per |r| > threshold component.

    Returns ``(dataset, dropped_names, seed)``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    corr = np.abs(correlation_matrix(ds.rows))
    d = corr.shape[0]
    adj = corr > threshold
    np.fill_diagonal(adj, False)

    rng = np.random.default_rng(seed)
    seen = np.zeros(d, dtype=bool)
    keep = []
    for start in range(d):
        if seen[start]:
            continue
        comp, stack = [], [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comp.sort()
        keep.append(comp[0] if len(comp) == 1 else comp[int(rng.integers(len(comp)))])
    keep.sort()
    dropped = [ds.schema.names[i] for i in range(d) if i not in keep]
    new = Dataset(ds.schema.subset(keep), ds.rows[:, keep], ds.labels, validate=False)
    return new, dropped, seed


def train_test_split(ds: Dataset, train_fraction: float = 0.75, seed: int = 0):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(ds)
    n_train = int(round(n * train_fraction))
    if n_train < 1 or n_train > n - 1:
        raise ValueError("partition too small")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.take(np.sort(perm[:n_train])), ds.take(np.sort(perm[n_train:]))


def oversample_minority(ds: Dataset, minority_class: int) -> Dataset:
    counts = ds.class_counts()
    if minority_class < 0 or minority_class >= len(counts) or counts[minority_class] == 0:
        raise ValueError(f"class {minority_class} absent")
    target = int(counts.max())
    idx = np.flatnonzero(ds.labels == minority_class)
    need = target - idx.size
    if need <= 0:
        return ds
    extra = idx[np.arange(need) % idx.size]
    order = np.concatenate([np.arange(len(ds)), extra])
    return ds.take(order)

