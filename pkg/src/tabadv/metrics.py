"""Attacker risk and effort metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

L0_TOL = 1e-12


def l0(x, x_adv, c=None) -> int:
    """Number of modified features.

    With a constraint set ``c`` both vectors are first rounded by feature
    type; discrete coordinates then compare exactly and continuous ones
    with a 1e-12 tolerance.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError("length mismatch")
    if c is None:
        return int(np.sum(np.abs(x - x_adv) > L0_TOL))
    xr, ar = c.round(x), c.round(x_adv)
    integral = c._integral
    diff = np.where(integral, xr != ar, np.abs(xr - ar) > L0_TOL)
    return int(diff.sum())


def l2(x, x_adv) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError("length mismatch")
    return float(np.linalg.norm(x - x_adv))


@dataclass
class LedgerRow:
    index: int
    x: np.ndarray
    x_adv: np.ndarray
    target_success: bool
    queries: int
    surrogate_success: bool | None = None
    wall_time: float = 0.0
    y: int = 0
    iterations: int = 0
    surrogate_queries: int = 0
    l2_trace: list = field(default_factory=list)


@dataclass
class RunLedger:
    attack: str
    kind: str  # "query" or "transfer"
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def successful(self):
        return [r for r in self.rows if r.target_success]


def success_rates(ledger: RunLedger, kind: str | None = None) -> dict:
    """Success-rate decomposition.

    Query attacks report ``sr`` only. Transfer attacks report
    ``surrogate_sr``, ``transfer_sr`` (target flips among surrogate
    flips; None when the surrogate was never fooled) and ``overall_sr``.
    """
    kind = kind or ledger.kind
    n = len(ledger)
    if n == 0:
        raise ValueError("empty ledger")
    target = sum(1 for r in ledger.rows if r.target_success)
    if kind == "query":
        return {"sr": target / n, "surrogate_sr": None, "transfer_sr": None, "overall_sr": target / n}
    sur = sum(1 for r in ledger.rows if r.surrogate_success)
    both = sum(1 for r in ledger.rows if r.surrogate_success and r.target_success)
    return {
        "sr": both / n,
        "surrogate_sr": sur / n,
        "transfer_sr": both / sur if sur else None,
        "overall_sr": both / n,
    }


def overall_success_rate(surrogate_sr: float, transfer_sr: float) -> float:
    return surrogate_sr * transfer_sr


def query_stats(ledger: RunLedger) -> dict:
    if len(ledger) == 0:
        raise ValueError("empty ledger")
    q = np.array([r.queries for r in ledger.rows], dtype=np.float64)
    return {"mean": float(q.mean()), "median": float(np.median(q)), "max": float(q.max())}


@dataclass
class EffortModel:
    """Inputs of the crafting-time models.

    ``n`` counts target queries (query attacks) or surrogate
    optimization queries (transfer attacks); ``t`` is one query's time;
    ``alpha_q`` the query-time factor; ``beta`` one optimization
    iteration's time; ``t_surrogate`` the surrogate training time.
    """

    n: float
    t: float
    alpha_q: float = 1.0
    beta: float = 1.0
    t_surrogate: float = 0.0

    def __post_init__(self):
        for name in ("n", "t", "alpha_q", "beta", "t_surrogate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def time_query_attack(e: EffortModel) -> float:
    return e.n * e.t**2 * e.alpha_q * e.beta


def time_transfer_attack(e: EffortModel) -> float:
    return e.n * e.t**2 * e.alpha_q * e.beta + e.t_surrogate + e.t
