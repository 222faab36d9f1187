from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from tabadv.learners.trees import predict as _predict
from tabadv.learners.trees import predict_proba as _predict_proba


class InvalidStart(ValueError):
    """The model does not predict the true label on the original sample."""


class InitFailed(RuntimeError):
    """No misclassified starting point was found."""


class BlackBoxHandle:
    """Label/probability oracle around a model that counts every prediction.

    Each predicted row is one query; a batch of ``n`` rows costs ``n``.
    """

    def __init__(self, model):
        self._model = model
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._queries

    def _charge(self, X) -> None:
        n = 1 if np.ndim(X) == 1 else int(np.shape(X)[0])
        with self._lock:
            self._queries += n

    def predict(self, X):
        self._charge(X)
        return _predict(self._model, X)

    def predict_proba(self, X):
        self._charge(X)
        return _predict_proba(self._model, X)


@dataclass
class AttackOutcome:
    success: bool
    x_adv: np.ndarray
    queries: int
    iterations: int
    l2_trace: list = field(default_factory=list)
    surrogate_success: bool | None = None
    transfer_success: bool | None = None
    selected: list | None = None
    embedding_distance: float | None = None
    surrogate_queries: int = 0


def free_mask(c, reg=None) -> np.ndarray:
    """Coordinates an attacker may move directly (not immutable, not dependent)."""
    mask = np.ones(c.n_features, dtype=bool)
    mask[list(c.immutable)] = False
    if reg is not None:
        mask[list(reg.dependents)] = False
    return mask


def l2(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(d @ d))
