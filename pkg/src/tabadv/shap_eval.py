"""Exact Tree-SHAP attributions and SHAP-range anomaly metrics.

Attributions use path-dependent conditioning: a feature outside the
coalition is marginalised by following both children of a split in
proportion to their training-row counts. Boosted models are explained on
the log-odds margin, forests on the probability scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from tabadv import kernels
from tabadv.learners.trees import TreeEnsemble, predict

BRUTE_FORCE_MAX_FEATURES = 12


@dataclass(frozen=True)
class ShapExplanation:
    attributions: np.ndarray
    base_value: float


def shap_matrix(e: TreeEnsemble, X) -> np.ndarray:
    """Attributions for every row of ``X``; shape (n, n_features)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != e.n_features:
        raise ValueError("dimension mismatch")
    if not e.trees:
        return np.zeros_like(X)
    left, right, feat, thr, val, wt, roots, depth = e.packed
    if np.any(wt <= 0):
        raise ValueError("weightless tree: node sample weights must be positive")
    phi = kernels.ensemble_shap(left, right, feat, thr, val, wt, roots, depth, X, e.n_features)
    return phi * e.tree_scale


def tree_shap(e: TreeEnsemble, sample) -> ShapExplanation:
    sample = np.asarray(sample, dtype=np.float64)
    return ShapExplanation(shap_matrix(e, sample[None, :])[0], e.expected_margin())


def mean_abs_shap(e: TreeEnsemble, rows) -> np.ndarray:
    return np.abs(shap_matrix(e, rows)).mean(axis=0)


# -- brute-force oracle ----------------------------------------------------

def _leaf_paths(tree):
    """For every leaf: (value, [(feature, went_left_child, child_frac)])."""
    out = []
    stack = [(0, [])]
    while stack:
        node, path = stack.pop()
        if tree.left[node] < 0:
            out.append((tree.value[node], path))
            continue
        w = tree.weight[node]
        f, t = tree.feature[node], tree.threshold[node]
        for child, is_left in ((tree.left[node], True), (tree.right[node], False)):
            stack.append((child, path + [(f, t, is_left, tree.weight[child] / w)]))
    return out


def conditional_expectations(e: TreeEnsemble, sample) -> np.ndarray:
    """E[f(x) | x_S] for every coalition S, indexed by bitmask (feature i = bit i)."""
    d = e.n_features
    masks = np.arange(1 << d)
    member = ((masks[:, None] >> np.arange(d)) & 1).astype(bool)
    total = np.zeros(masks.size)
    for tree in e.trees:
        for value, path in _leaf_paths(tree):
            w = np.ones(masks.size)
            for f, t, is_left, frac in path:
                follows = (sample[f] <= t) == is_left
                w *= np.where(member[:, f], 1.0 if follows else 0.0, frac)
            total += value * w
    return e.offset + e.tree_scale * total


def shap_brute_force(e: TreeEnsemble, sample, max_features=BRUTE_FORCE_MAX_FEATURES) -> ShapExplanation:
    """Shapley values by enumerating every coalition. Exponential; small d only."""
    d = e.n_features
    if d > max_features:
        raise ValueError(f"too many features for enumeration ({d} > {max_features})")
    sample = np.asarray(sample, dtype=np.float64)
    v = conditional_expectations(e, sample)
    masks = np.arange(1 << d)
    sizes = np.array([bin(s).count("1") for s in masks])
    weights = np.array([1.0 / (d * comb(d - 1, k)) if k < d else 0.0 for k in range(d + 1)])
    phi = np.zeros(d)
    for i in range(d):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (v[without | bit] - v[without]))
    return ShapExplanation(phi, float(v[0]))


# -- range tables and anomaly metrics ---------------------------------------

@dataclass(frozen=True)
class ShapRangeTable:
    """Per-class (or pooled) closed [min, max] interval of each feature's SHAP value."""

    lower: np.ndarray  # (n_groups, d)
    upper: np.ndarray
    mode: str

    def bounds(self, predicted_class: int):
        g = 0 if self.mode == "standard" else int(predicted_class)
        return self.lower[g], self.upper[g]


def build_range_table(e: TreeEnsemble, benign, mode="csad", classes=None, n_classes=None,
                      attributions=None) -> ShapRangeTable:
    """Ranges of benign attributions grouped by class.

    ``classes`` defaults to the model's predicted class for each benign
    row; pass true labels to group by those instead.
    """
    if mode not in ("csad", "standard"):
        raise ValueError(f"unknown mode {mode!r}")
    rows = np.asarray(benign.rows if hasattr(benign, "rows") else benign, dtype=np.float64)
    phi = shap_matrix(e, rows) if attributions is None else np.asarray(attributions)
    if mode == "standard":
        if phi.shape[0] == 0:
            raise ValueError("empty benign set")
        return ShapRangeTable(phi.min(axis=0)[None], phi.max(axis=0)[None], mode)
    cls = predict(e, rows) if classes is None else np.asarray(classes)
    k = n_classes or (benign.schema.n_classes if hasattr(benign, "schema") else int(cls.max()) + 1)
    lo = np.empty((k, phi.shape[1]))
    hi = np.empty((k, phi.shape[1]))
    for c in range(k):
        sel = phi[cls == c]
        if sel.shape[0] == 0:
            raise ValueError(f"empty class {c} in benign reference set")
        lo[c] = sel.min(axis=0)
        hi[c] = sel.max(axis=0)
    return ShapRangeTable(lo, hi, mode)


@dataclass(frozen=True)
class ImportanceAnomalyReport:
    rate: float
    avg_count: float
    counts: np.ndarray
    flags: np.ndarray


def anomalous_counts(table: ShapRangeTable, attributions, predicted_classes) -> np.ndarray:
    phi = np.atleast_2d(np.asarray(attributions, dtype=np.float64))
    out = np.zeros(phi.shape[0], dtype=np.int64)
    for r, (a, c) in enumerate(zip(phi, predicted_classes)):
        lo, hi = table.bounds(c)
        out[r] = int(np.sum((a < lo) | (a > hi)))
    return out


def importance_anomaly(table: ShapRangeTable, explanations, predicted_classes) -> ImportanceAnomalyReport:
    """Share of samples with any out-of-range attribution, and mean count per sample."""
    if len(explanations) == 0:
        raise ValueError("empty input")
    if len(explanations) != len(predicted_classes):
        raise ValueError("explanations and predicted classes must align")
    phi = np.array([x.attributions if isinstance(x, ShapExplanation) else x for x in explanations])
    counts = anomalous_counts(table, phi, predicted_classes)
    flags = counts > 0
    return ImportanceAnomalyReport(float(flags.mean()), float(counts.mean()), counts, flags)
