"""CART trees, random forests and gradient-boosted ensembles.

Trees are stored as flat node arrays, the layout the compiled kernels
consume. Every node records how many training rows reached it; the
path-dependent SHAP explainer uses these counts as its background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tabadv import kernels

KINDS = ("random_forest", "gradient_boosting", "regression")


@dataclass(frozen=True)
class Tree:
    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        for name in ("left", "right", "feature"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("threshold", "value", "weight"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.weight <= 0):
            raise ValueError("node_sample_weight must be positive")
        if not np.all(np.isfinite(self.value[self.left < 0])):
            raise ValueError("leaf values must be finite")
        if np.any((self.left < 0) != (self.right < 0)):
            raise ValueError("internal nodes need both children")

    @property
    def n_nodes(self) -> int:
        return self.left.size

    @property
    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):  # children always follow their parent
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def expected_value(self) -> float:
        leaves = self.left < 0
        return float(np.sum(self.value[leaves] * self.weight[leaves]) / self.weight[0])

    @classmethod
    def leaf(cls, value: float, weight: float = 1.0) -> "Tree":
        return cls([-1], [-1], [-1], [0.0], [value], [weight])

    @classmethod
    def stump(cls, feature: int, threshold: float, left_value: float, right_value: float,
              left_weight: float = 1.0, right_weight: float = 1.0) -> "Tree":
        return cls(
            [1, -1, -1],
            [2, -1, -1],
            [feature, -1, -1],
            [threshold, 0.0, 0.0],
            [0.0, left_value, right_value],
            [left_weight + right_weight, left_weight, right_weight],
        )


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple[Tree, ...]
    kind: str
    n_features: int
    base_score: float = 0.0
    learning_rate: float = 1.0
    _packed: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "_packed", _pack(self.trees))

    @property
    def packed(self):
        return self._packed

    @property
    def tree_scale(self) -> float:
        """Factor applied to the summed leaf values."""
        if self.kind == "random_forest":
            return 1.0 / max(len(self.trees), 1)
        return self.learning_rate

    @property
    def offset(self) -> float:
        return 0.0 if self.kind == "random_forest" else self.base_score

    def margin(self, X) -> np.ndarray:
        """Raw model output: log-odds for boosting, probability for forests."""
        X = _as_matrix(X, self.n_features)
        if not self.trees:
            return np.full(X.shape[0], self.offset if self.kind != "random_forest" else 0.5)
        left, right, feat, thr, val, _, roots, _ = self._packed
        s = kernels.ensemble_sum(left, right, feat, thr, val, roots, X)
        return self.offset + self.tree_scale * s

    def expected_margin(self) -> float:
        if not self.trees:
            return self.offset if self.kind != "random_forest" else 0.5
        return self.offset + self.tree_scale * sum(t.expected_value() for t in self.trees)

    def apply(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        left, right, feat, thr, _, _, roots, _ = self._packed
        return kernels.ensemble_apply(left, right, feat, thr, roots, X)


def _pack(trees):
    if not trees:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, np.zeros(0), np.zeros(0), np.zeros(0), z, 0
    offsets = np.cumsum([0] + [t.n_nodes for t in trees[:-1]])
    left, right = [], []
    for off, t in zip(offsets, trees):
        left.append(np.where(t.left >= 0, t.left + off, -1))
        right.append(np.where(t.right >= 0, t.right + off, -1))
    return (
        np.concatenate(left),
        np.concatenate(right),
        np.concatenate([t.feature for t in trees]),
        np.concatenate([t.threshold for t in trees]),
        np.concatenate([t.value for t in trees]),
        np.concatenate([t.weight for t in trees]),
        np.asarray(offsets, dtype=np.int64),
        max(t.max_depth for t in trees),
    )


def _as_matrix(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"dimension mismatch: expected {n_features} features, got {X.shape[-1]}")
    return X


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def predict_proba(model, sample):
    """Probability of class 1 for one sample (scalar) or a matrix (vector)."""
    single = np.ndim(sample) == 1
    if isinstance(model, TreeEnsemble):
        m = model.margin(sample)
        p = m if model.kind == "random_forest" else _sigmoid(m)
        if model.kind == "regression":
            raise TypeError("regression ensembles have no class probability")
    else:
        p = model.predict_proba(sample)
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    return float(p[0]) if single and p.ndim else p


def predict(model, sample):
    """Class label; ties at probability 0.5 go to class 1."""
    p = predict_proba(model, sample)
    if np.ndim(p) == 0:
        return int(p >= 0.5)
    return (p >= 0.5).astype(np.int64)


# -- CART builder -----------------------------------------------------------

def _best_split(X, y, idx, features, min_leaf):
    """Best squared-error reduction split over ``features`` for rows ``idx``."""
    n = idx.size
    ys_all = y[idx]
    total = ys_all.sum()
    parent = total * total / n
    best = (1e-12, -1, 0.0)
    for f in features:
        xf = X[idx, f]
        order = np.argsort(xf, kind="stable")
        xs = xf[order]
        cs = np.cumsum(ys_all[order])
        nl = np.arange(1, n)
        sl = cs[:-1]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - parent
        ok = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            if not xs[i] <= thr < xs[i + 1]:
                thr = xs[i]
            best = (gain[i], int(f), float(thr))
    return best


def build_tree(X, y, leaf_value, max_depth, min_samples_leaf=1, features=None, rows=None) -> Tree:
    """Greedy CART on a squared-error criterion.

    ``leaf_value(idx)`` returns the value stored at a leaf holding rows
    ``idx``. On 0/1 targets the squared-error split ranking coincides with
    Gini impurity, so the same builder serves classification forests.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if features is None:
        features = np.arange(X.shape[1])
    if rows is None:
        rows = np.arange(X.shape[0])
    if rows.size == 0:
        raise ValueError("empty input")

    left, right, feat, thr, val, wt = [], [], [], [], [], []

    def grow(idx, depth):
        node = len(left)
        left.append(-1)
        right.append(-1)
        feat.append(-1)
        thr.append(0.0)
        val.append(0.0)
        wt.append(float(idx.size))
        split = None
        if depth < max_depth and idx.size >= 2 * min_samples_leaf:
            gain, f, t = _best_split(X, y, idx, features, min_samples_leaf)
            if f >= 0:
                split = (f, t)
        if split is None:
            val[node] = float(leaf_value(idx))
            return node
        f, t = split
        go = X[idx, f] <= t
        feat[node] = f
        thr[node] = t
        left[node] = grow(idx[go], depth + 1)
        right[node] = grow(idx[~go], depth + 1)
        return node

    grow(np.asarray(rows), 0)
    return Tree(left, right, feat, thr, val, wt)


# -- ensembles --------------------------------------------------------------

def _xy(train, target=None):
    if hasattr(train, "rows"):
        X, y = train.rows, train.labels
    elif target is not None:
        X, y = train, target
    else:
        X, y = train
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y if target is None else target, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty input")
    if y.shape != (X.shape[0],):
        raise ValueError("target must align with rows")
    return X, y


def _logloss(y, margin):
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def fit_gradient_boosting(train, n_estimators=100, max_depth=3, learning_rate=0.1, seed=0,
                          min_samples_leaf=1, subsample_features=None) -> TreeEnsemble:
    """Binary logistic boosting with Newton leaf values.

    Each leaf's Newton step is halved until the leaf's own loss does not
    increase, so with ``learning_rate <= 1`` the training loss never goes
    up from one tree to the next.
    """
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    X, y = _xy(train)
    if np.unique(y).size < 2:
        raise ValueError("single-class training data")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("gradient boosting classifier needs binary labels")
    rng = np.random.default_rng(seed)
    p0 = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = float(np.log(p0 / (1 - p0)))
    margin = np.full(y.size, base)
    d = X.shape[1]
    trees = []
    for _ in range(n_estimators):
        p = _sigmoid(margin)
        resid = y - p
        feats = np.arange(d)
        if subsample_features is not None:
            m = max(1, int(round(subsample_features * d)))
            feats = np.sort(rng.choice(d, size=m, replace=False))

        def leaf(idx, margin=margin, resid=resid, p=p):
            h = float(np.sum(p[idx] * (1 - p[idx])))
            g = float(np.sum(resid[idx]))
            step = g / max(h, 1e-12)
            m0 = margin[idx]
            yl = y[idx]
            before = _logloss(yl, m0)
            for _ in range(60):
                if _logloss(yl, m0 + step) <= before:
                    return step
                step *= 0.5
            return 0.0

        tree = build_tree(X, resid, leaf, max_depth, min_samples_leaf, feats)
        trees.append(tree)
        margin = margin + learning_rate * _tree_values(tree, X)
    return TreeEnsemble(tuple(trees), "gradient_boosting", d, base, learning_rate)


def fit_regression_gbm(train, target, n_estimators=200, max_depth=6, learning_rate=0.1,
                       seed=0, min_samples_leaf=1) -> TreeEnsemble:
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    X, y = _xy(train, target)
    if not np.all(np.isfinite(y)):
        raise ValueError("target must be finite")
    base = float(y.mean())
    pred = np.full(y.size, base)
    trees = []
    for _ in range(n_estimators):
        resid = y - pred
        tree = build_tree(X, resid, lambda idx, r=resid: r[idx].mean(), max_depth, min_samples_leaf)
        trees.append(tree)
        pred = pred + learning_rate * _tree_values(tree, X)
    return TreeEnsemble(tuple(trees), "regression", X.shape[1], base, learning_rate)


def fit_random_forest(train, n_estimators=100, max_depth=8, seed=0, bootstrap=False,
                      min_samples_leaf=1) -> TreeEnsemble:
    """Forest of Gini trees, each restricted to a random sqrt(d) feature subset."""
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    X, y = _xy(train)
    if np.unique(y).size < 2:
        raise ValueError("single-class training data")
    rng = np.random.default_rng(seed)
    n, d = X.shape
    m = max(1, int(round(np.sqrt(d))))
    trees = []
    for _ in range(n_estimators):
        feats = np.sort(rng.choice(d, size=m, replace=False))
        rows = np.sort(rng.integers(0, n, size=n)) if bootstrap else np.arange(n)
        tree = build_tree(X, y, lambda idx: y[idx].mean(), max_depth, min_samples_leaf, feats, rows)
        trees.append(tree)
    return TreeEnsemble(tuple(trees), "random_forest", d)


def _tree_values(tree: Tree, X) -> np.ndarray:
    roots = np.zeros(1, dtype=np.int64)
    return kernels.ensemble_sum(tree.left, tree.right, tree.feature, tree.threshold, tree.value, roots, X)


def staged_logloss(model: TreeEnsemble, X, y) -> list[float]:
    """Training log-loss after 0, 1, ..., n trees of a boosting model."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    margin = np.full(X.shape[0], model.base_score)
    out = [_logloss(y, margin)]
    for t in model.trees:
        margin = margin + model.learning_rate * _tree_values(t, X)
        out.append(_logloss(y, margin))
    return out
