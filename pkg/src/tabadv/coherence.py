"""Projection of perturbed samples back onto valid, editable, consistent rows.

``tabular_modify`` clips, rounds, restores immutable features and then
recomputes dependent features from regression models fitted on benign
data. Regressors never see any dependent column, so the projection is
idempotent and the order in which dependents are corrected is irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tabadv.learners.trees import fit_regression_gbm
from tabadv.schema import Schema


@dataclass(frozen=True)
class ConstraintSet:
    lower: np.ndarray
    upper: np.ndarray
    kinds: tuple[str, ...]
    immutable: frozenset = frozenset()
    clamp_lower: np.ndarray | None = None
    clamp_upper: np.ndarray | None = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.shape != (len(self.kinds),):
            raise ValueError("bounds and kinds must align")
        if np.any(lo > hi):
            raise ValueError("min > max")
        bad = [i for i in self.immutable if not 0 <= i < lo.size]
        if bad:
            raise ValueError(f"immutable indices out of range: {bad}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "immutable", frozenset(int(i) for i in self.immutable))
        object.__setattr__(self, "_integral", np.array([k != "continuous" for k in self.kinds]))
        object.__setattr__(self, "_imm", np.array(sorted(self.immutable), dtype=np.int64))
        clo = lo if self.clamp_lower is None else np.asarray(self.clamp_lower, dtype=np.float64)
        chi = hi if self.clamp_upper is None else np.asarray(self.clamp_upper, dtype=np.float64)
        # discrete features clip to the integers inside their range so rounding stays in range
        clo = np.where(self._integral, np.ceil(clo), clo)
        chi = np.where(self._integral, np.floor(chi), chi)
        object.__setattr__(self, "_clo", clo)
        object.__setattr__(self, "_chi", chi)

    @classmethod
    def from_schema(cls, schema: Schema, clamps: dict | None = None) -> "ConstraintSet":
        """Build from a schema; ``clamps`` maps feature index to (lo, hi) plausibility limits."""
        lo, hi = schema.lower, schema.upper
        clo = chi = None
        if clamps:
            clo, chi = lo.copy(), hi.copy()
            for i, (a, b) in clamps.items():
                clo[i] = max(lo[i], a)
                chi[i] = min(hi[i], b)
        return cls(lo, hi, tuple(f.kind for f in schema.features), frozenset(schema.immutable_indices),
                   clo, chi)

    @property
    def n_features(self) -> int:
        return self.lower.size

    def clip(self, z: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(z, self._clo), self._chi)

    def round(self, z: np.ndarray) -> np.ndarray:
        # nearest integer is also nearest of {0, 1} for binary once clipped
        out = z.copy()
        out[..., self._integral] = np.floor(out[..., self._integral] + 0.5)
        return out

    def violations(self, z) -> int:
        """Number of values in ``z`` breaking a range or integrality rule."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        bad = (z < self.lower) | (z > self.upper) | ~np.isfinite(z)
        bad |= self._integral & (z != np.round(z))
        return int(bad.sum())


@dataclass(frozen=True)
class DependencyRegistry:
    models: dict = field(default_factory=dict)
    dependents: tuple = ()
    n_features: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dependents", tuple(sorted(int(i) for i in self.dependents)))
        missing = set(self.models) - set(self.dependents)
        if missing:
            raise ValueError(f"registered regressors for non-dependent features {sorted(missing)}")
        inputs = [i for i in range(self.n_features) if i not in self.dependents]
        object.__setattr__(self, "inputs", np.array(inputs, dtype=np.int64))
        for j, m in self.models.items():
            if m.n_features != len(inputs):
                raise ValueError(f"regressor for feature {j} does not match the input layout")

    @classmethod
    def empty(cls, n_features: int = 0) -> "DependencyRegistry":
        return cls({}, (), n_features)

    def __len__(self):
        return len(self.models)

    def predict(self, z: np.ndarray) -> dict:
        X = np.atleast_2d(z)[:, self.inputs]
        return {j: self.models[j].margin(X) for j in self.dependents}


def fit_dependency_models(train, dependents, n_estimators=200, max_depth=6, learning_rate=0.1,
                          seed=0, schema: Schema | None = None) -> DependencyRegistry:
    """One squared-error boosting regressor per dependent feature.

    Inputs are every non-dependent column; ``schema``, when given, must
    flag each index as dependent.
    """
    X = np.asarray(train.rows if hasattr(train, "rows") else train, dtype=np.float64)
    d = X.shape[1]
    dependents = sorted(int(i) for i in dependents)
    if schema is None and hasattr(train, "schema"):
        schema = train.schema
    if not dependents:
        return DependencyRegistry.empty(d)
    bad = [i for i in dependents if not 0 <= i < d]
    if bad:
        raise ValueError(f"invalid dependent indices {bad}")
    if len(set(dependents)) >= d:
        raise ValueError("dependent set covers all features; no regressor inputs left")
    if schema is not None:
        unflagged = [i for i in dependents if not schema.features[i].dependent]
        if unflagged:
            raise ValueError(f"features {unflagged} are not flagged dependent in the schema")
    inputs = [i for i in range(d) if i not in dependents]
    models = {}
    for k, j in enumerate(dependents):
        models[j] = fit_regression_gbm(X[:, inputs], X[:, j], n_estimators, max_depth,
                                       learning_rate, seed=seed + k)
    return DependencyRegistry(models, tuple(dependents), d)


def tabular_modify(x, x_adv, c: ConstraintSet, reg: DependencyRegistry | None = None) -> np.ndarray:
    """Clip, round, restore immutables, then correct dependent features.

    Works on a single sample or a matrix of candidates sharing the same
    original ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.array(x_adv, dtype=np.float64)
    if z.shape[-1] != c.n_features or x.shape[-1] != c.n_features:
        raise ValueError("sample length does not match the constraint set")
    z = np.where(np.isfinite(z), z, np.broadcast_to(x, z.shape))
    z = c.clip(z)
    z = c.round(z)
    if c._imm.size:
        z[..., c._imm] = x[..., c._imm] if x.ndim == z.ndim else x[c._imm]
    if reg is not None and len(reg):
        preds = reg.predict(z)
        single = z.ndim == 1
        for j, v in preds.items():
            col = np.floor(np.clip(v, c._clo[j], c._chi[j]) + 0.5) if c._integral[j] else v
            col = np.clip(col, c._clo[j], c._chi[j])
            if single:
                z[j] = col[0]
            else:
                z[:, j] = col
    return z
