"""Class-specific anomaly detection (CSAD).

A bank holds one detector per class, each fitted only on benign rows of
that class; a sample is judged by the detector of the class the target
model assigns to it. The ``standard`` mode pools all benign rows into a
single detector and serves as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

from tabadv import kernels
from tabadv.learners.nn import AeNet, TrainConfig, fit_autoencoder, reconstruction_error
from tabadv.learners.trees import Tree

EULER_GAMMA = 0.5772156649015329


def c_factor(n) -> np.ndarray | float:
    """Average unsuccessful-search path length in a BST of ``n`` points.

    c(n) = 2 H(n-1) - 2 (n-1) / n with the exact harmonic number, and
    c(n) = 0 for n <= 1.
    """
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n >= 2
    nb = n[big]
    out[big] = 2.0 * (digamma(nb) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class IsolationForest:
    """Isolation trees whose leaves store depth + c(leaf size).

    Scoring then reduces to summing leaf values, which the ensemble
    traversal kernel already does.
    """

    trees: tuple
    psi: int
    n_features: int
    _packed: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        from tabadv.learners.trees import _pack

        object.__setattr__(self, "_packed", _pack(self.trees))

    @property
    def normalizer(self) -> float:
        return c_factor(self.psi)

    def mean_path_length(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        left, right, feat, thr, val, _, roots, _ = self._packed
        return kernels.ensemble_sum(left, right, feat, thr, val, roots, X) / len(self.trees)

    def score(self, X):
        X = np.asarray(X, dtype=np.float64)
        s = score_from_path_length(self.mean_path_length(X), self.psi)
        return float(s[0]) if X.ndim == 1 else s


def score_from_path_length(h, psi) -> np.ndarray:
    return np.power(2.0, -np.asarray(h, dtype=np.float64) / c_factor(psi))


def _isolation_tree(X, rng, height_limit):
    left, right, feat, thr, val, wt = [], [], [], [], [], []

    def grow(idx, depth):
        node = len(left)
        left.append(-1)
        right.append(-1)
        feat.append(-1)
        thr.append(0.0)
        val.append(0.0)
        wt.append(float(idx.size))
        if depth < height_limit and idx.size > 1:
            f = int(rng.integers(X.shape[1]))
            col = X[idx, f]
            lo, hi = col.min(), col.max()
            if lo < hi:
                t = float(rng.uniform(lo, hi))
                go = col <= t
                if (~go).any():
                    feat[node] = f
                    thr[node] = t
                    left[node] = grow(idx[go], depth + 1)
                    right[node] = grow(idx[~go], depth + 1)
                    return node
        val[node] = depth + c_factor(idx.size)
        return node

    grow(np.arange(X.shape[0]), 0)
    return Tree(left, right, feat, thr, val, wt)


def fit_isolation_forest(rows, n_trees=100, psi=256, seed=0) -> IsolationForest:
    """Isolation forest on subsamples of ``psi`` rows drawn without replacement.

    One randomly chosen feature is considered per split.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("isolation forest needs at least two rows")
    if psi < 2:
        raise ValueError("psi must be >= 2")
    psi = int(min(psi, X.shape[0]))
    rng = np.random.default_rng(seed)
    height = int(np.ceil(np.log2(psi)))
    trees = []
    for _ in range(n_trees):
        sub = X[rng.choice(X.shape[0], size=psi, replace=False)]
        trees.append(_isolation_tree(sub, rng, height))
    return IsolationForest(tuple(trees), psi, X.shape[1])


def if_score(f: IsolationForest, sample):
    return f.score(sample)


def ae_threshold(validation_errors, ddof=0) -> float:
    """mean + 2 * std of validation reconstruction errors (population std by default)."""
    e = np.asarray(validation_errors, dtype=np.float64)
    if e.size < 2:
        raise ValueError("need at least two validation errors")
    return float(e.mean() + 2.0 * e.std(ddof=ddof))


def threshold_for_fpr(scores, target_fpr) -> float:
    """Score threshold flagging (score > threshold) round(target_fpr * n) benign rows."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    if s.size == 0:
        raise ValueError("empty validation set")
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must be in [0, 1)")
    m = int(round(target_fpr * s.size))
    if m == 0:
        return float(np.nextafter(s[0], np.inf))
    if m >= s.size:
        return float(np.nextafter(s[-1], -np.inf))
    return float(s[m])


def calibrate_if_threshold(f: IsolationForest, benign_validation, target_fpr) -> float:
    rows = np.atleast_2d(np.asarray(benign_validation, dtype=np.float64))
    if rows.shape[0] == 0 or rows.size == 0:
        raise ValueError("empty validation set")
    return threshold_for_fpr(f.score(rows), target_fpr)


@dataclass
class AeDetector:
    net: AeNet
    threshold: float
    validation_errors: np.ndarray
    fpr: float
    fit_rows: np.ndarray | None = field(default=None, repr=False)

    def score(self, X):
        return np.atleast_1d(reconstruction_error(self.net, np.atleast_2d(X)))

    def flags(self, X) -> np.ndarray:
        return self.score(X) > self.threshold


@dataclass
class IfDetector:
    forest: IsolationForest
    threshold: float
    validation_scores: np.ndarray
    fpr: float
    fit_rows: np.ndarray | None = field(default=None, repr=False)

    def score(self, X):
        return np.atleast_1d(self.forest.score(np.atleast_2d(X)))

    def flags(self, X) -> np.ndarray:
        return self.score(X) > self.threshold


@dataclass
class DetectorBank:
    mode: str
    kind: str
    detectors: dict  # class -> detector; key None in standard mode
    n_classes: int
    validation: dict = field(default_factory=dict)  # same keys -> benign validation rows

    def __post_init__(self):
        if self.mode not in ("csad", "standard"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kind not in ("if", "ae"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        want = set(range(self.n_classes)) if self.mode == "csad" else {None}
        if set(self.detectors) != want:
            raise ValueError("detector keys do not match the bank mode")

    def detector_for(self, predicted_class):
        if self.mode == "standard":
            return self.detectors[None]
        if predicted_class not in self.detectors:
            raise ValueError(f"invalid predicted class {predicted_class}")
        return self.detectors[predicted_class]

    def flags(self, samples, predicted_classes) -> np.ndarray:
        X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        cls = np.asarray(predicted_classes, dtype=np.int64).reshape(-1)
        if X.shape[0] != cls.size:
            raise ValueError("samples and predicted classes must align")
        out = np.zeros(X.shape[0], dtype=bool)
        if self.mode == "standard":
            return self.detectors[None].flags(X) if X.shape[0] else out
        for c in np.unique(cls):
            sel = cls == c
            out[sel] = self.detector_for(int(c)).flags(X[sel])
        return out


def is_anomalous(bank: DetectorBank, sample, predicted_class) -> bool:
    return bool(bank.flags(np.asarray(sample)[None, :], [predicted_class])[0])


def detection_rate(bank: DetectorBank, samples, predicted_classes) -> float:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0 or np.size(samples) == 0:
        raise ValueError("empty sample set")
    return float(bank.flags(X, predicted_classes).mean())


@dataclass
class BankConfig:
    min_samples: int = 20
    validation_fraction: float = 0.2
    n_trees: int = 100
    psi: int = 256
    ae_epochs: int = 10
    ae_learning_rate: float = 1e-3
    ae_weight_decay: float = 1e-8
    ae_batch_size: int = 32
    ae_hidden: int = 64
    seed: int = 0


def _groups(rows, labels, mode, n_classes, min_samples):
    if mode == "standard":
        return {None: rows}
    out = {}
    for c in range(n_classes):
        sel = rows[labels == c]
        if sel.shape[0] < min_samples:
            raise ValueError(f"class {c} has {sel.shape[0]} benign rows, need >= {min_samples}")
        out[c] = sel
    return out


def _split(rows, frac, rng):
    perm = rng.permutation(rows.shape[0])
    n_val = max(2, int(round(frac * rows.shape[0])))
    n_val = min(n_val, rows.shape[0] - 2)
    return rows[perm[n_val:]], rows[perm[:n_val]]


def fit_bank(train, kind="ae", mode="csad", cfg: BankConfig | None = None, match=None,
             target_fpr=None) -> DetectorBank:
    """Fit a detector bank on benign rows.

    AE banks threshold each detector at mean + 2 std of its validation
    reconstruction errors. IF banks are calibrated to ``target_fpr`` or,
    when ``match`` (an AE bank of the same mode) is given, to that bank's
    per-group validation FPR on the very same validation rows.
    """
    cfg = cfg or BankConfig()
    rows = np.asarray(train.rows, dtype=np.float64)
    labels = np.asarray(train.labels)
    n_classes = train.schema.n_classes
    if kind == "if" and match is None and target_fpr is None:
        raise ValueError("isolation forest bank needs match= or target_fpr=")
    if match is not None and (match.kind != "ae" or match.mode != mode):
        raise ValueError("match must be an AE bank of the same mode")

    groups = _groups(rows, labels, mode, n_classes, cfg.min_samples)
    detectors, validation = {}, {}
    for g, X in groups.items():
        key = -1 if g is None else g
        rng = np.random.default_rng([cfg.seed, key + 1])
        if match is not None:
            fit_rows = match.detectors[g].fit_rows
            val = match.validation[g]
        else:
            fit_rows, val = _split(X, cfg.validation_fraction, rng)
        validation[g] = val
        if kind == "ae":
            tc = TrainConfig(epochs=cfg.ae_epochs, learning_rate=cfg.ae_learning_rate,
                             weight_decay=cfg.ae_weight_decay, batch_size=cfg.ae_batch_size,
                             seed=int(rng.integers(2**31)))
            net = fit_autoencoder(fit_rows, tc, cfg.ae_hidden)
            errs = np.atleast_1d(reconstruction_error(net, val))
            thr = ae_threshold(errs)
            det = AeDetector(net, thr, errs, float(np.mean(errs > thr)), fit_rows)
        else:
            forest = fit_isolation_forest(fit_rows, cfg.n_trees, cfg.psi, seed=int(rng.integers(2**31)))
            scores = np.atleast_1d(forest.score(val))
            fpr = match.detectors[g].fpr if match is not None else float(target_fpr)
            thr = threshold_for_fpr(scores, fpr)
            det = IfDetector(forest, thr, scores, float(np.mean(scores > thr)), fit_rows)
        detectors[g] = det
    return DetectorBank(mode, kind, detectors, n_classes, validation)


@dataclass(frozen=True)
class ComplexityModel:
    counts: tuple
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if any(c < 0 for c in self.counts):
            raise ValueError("class counts must be non-negative")

    @property
    def n(self) -> float:
        return float(sum(self.counts))

    @classmethod
    def balanced(cls, n, k, alpha):
        return cls(tuple([n / k] * k), alpha)


def csad_cost_ratio(model: ComplexityModel) -> float:
    """Training cost of per-class detectors relative to one pooled detector."""
    n = model.n
    if n <= 0:
        raise ValueError("total count must be positive")
    # divide before powering to stay finite for large n and alpha
    return float(sum((c / n) ** model.alpha for c in model.counts))
