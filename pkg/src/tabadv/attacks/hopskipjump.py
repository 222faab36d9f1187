"""HopSkipJump (L2) adapted to constrained tabular inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabadv.attacks.base import AttackOutcome, InitFailed, InvalidStart, free_mask, l2
from tabadv.attacks.boundary import similarity
from tabadv.coherence import tabular_modify


class DegenerateProbes(RuntimeError):
    """All gradient-estimation probes got the same label."""


@dataclass
class HsjConfig:
    norm: str = "l2"
    max_iter: int = 50
    max_eval: int = 10000
    init_eval: int = 500
    init_size: int = 100
    bs_tolerance: float = 1e-3
    probe_radius: float = 0.05
    max_step_halvings: int = 30
    alpha_sim: float = 1.0
    query_budget: int | None = None
    init_mean: np.ndarray | None = None
    init_std: np.ndarray | None = None

    def __post_init__(self):
        if self.norm != "l2":
            raise ValueError("only the L2 variant is supported")
        if self.init_eval > self.max_eval:
            raise ValueError("init_eval must not exceed max_eval")
        if min(self.max_iter, self.init_eval, self.init_size) < 1:
            raise ValueError("iteration and evaluation counts must be positive")


def binary_search_boundary(m, x, x_adv, tol, y=None):
    """Bisect the segment [x, x_adv] down to width ``tol``.

    Returns the misclassified endpoint. ``y`` defaults to the model's
    label for ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if y is None:
        y = m.predict(x)
    if m.predict(x_adv) == y:
        raise ValueError("endpoints on the same side of the boundary")
    width = l2(x, x_adv)
    lo, hi = 0.0, 1.0  # fraction of the way from x to x_adv; hi is adversarial
    while (hi - lo) * width > tol:
        mid = 0.5 * (lo + hi)
        if m.predict(x + mid * (x_adv - x)) != y:
            hi = mid
        else:
            lo = mid
    return x + hi * (x_adv - x) if hi < 1.0 else x_adv.copy()


def estimate_update(m, x_boundary, n_eval, radius, rng, y, mask=None):
    """Monte-Carlo estimate of the boundary normal pointing into the adversarial side."""
    if n_eval < 2:
        raise ValueError("n_eval must be >= 2")
    d = x_boundary.size
    u = rng.standard_normal((n_eval, d))
    if mask is not None:
        u[:, ~mask] = 0.0
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    probes = x_boundary + radius * u
    phi = np.where(m.predict(probes) != y, 1.0, -1.0)
    base = phi.mean()
    if abs(base) == 1.0:
        raise DegenerateProbes("degenerate probes: every probe has the same label")
    g = ((phi - base)[:, None] * u).mean(axis=0)
    n = np.linalg.norm(g)
    if n == 0:
        raise DegenerateProbes("degenerate probes: zero direction")
    return g / n


def hopskipjump_attack(m, x, y, cfg: HsjConfig, c, reg=None, rng=None) -> AttackOutcome:
    """HopSkipJump against black-box handle ``m``.

    The walk happens on unprojected points; at the end of every iteration
    the current point is projected and, if still adversarial and no
    farther from ``x``, becomes the new incumbent. ``l2_trace`` holds the
    incumbent distance after each iteration and never increases.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    start = m.queries
    if m.predict(x) != y:
        raise InvalidStart("model does not predict the true label on x")
    mean = x if cfg.init_mean is None else np.asarray(cfg.init_mean, dtype=np.float64)
    std = np.ones_like(x) if cfg.init_std is None else np.asarray(cfg.init_std, dtype=np.float64)
    mask = free_mask(c, reg)
    budget = cfg.query_budget

    def spent():
        return m.queries - start

    seed = None
    for _ in range(cfg.init_size):
        cand = tabular_modify(x, mean + std * rng.standard_normal(x.size), c, reg)
        if m.predict(cand) != y:
            seed = cand
            break
    if seed is None:
        raise InitFailed("no misclassified starting point found")

    incumbent = seed
    best = l2(x, incumbent)
    bnd = binary_search_boundary(m, x, seed, cfg.bs_tolerance * best, y)
    proj = tabular_modify(x, bnd, c, reg)
    if l2(x, proj) < best and m.predict(proj) != y:
        incumbent, best = proj, l2(x, proj)
    current = bnd
    trace = [best]
    it = 0
    while it < cfg.max_iter and best > 0 and similarity(x, incumbent) < cfg.alpha_sim:
        if budget is not None and spent() >= budget:
            break
        it += 1
        dist = l2(x, current)
        if dist == 0:
            break
        bnd = binary_search_boundary(m, x, current, cfg.bs_tolerance * dist, y)
        dist = l2(x, bnd)
        n_eval = int(min(cfg.init_eval * np.sqrt(it), cfg.max_eval))
        if budget is not None:
            n_eval = min(n_eval, budget - spent())
        if n_eval < 2:
            break
        radius = cfg.probe_radius * dist
        grad = None
        for _ in range(8):
            try:
                grad = estimate_update(m, bnd, n_eval, radius, rng, y, mask)
                break
            except DegenerateProbes:
                radius *= 2.0
                if budget is not None and spent() + n_eval > budget:
                    break
        if grad is None:
            current = bnd
        else:
            step = dist / np.sqrt(it)
            nxt = None
            for _ in range(cfg.max_step_halvings):
                cand = bnd + step * grad
                if m.predict(cand) != y:
                    nxt = cand
                    break
                step *= 0.5
            current = bnd if nxt is None else nxt
        proj = tabular_modify(x, current, c, reg)
        dp = l2(x, proj)
        if dp <= best and m.predict(proj) != y:
            incumbent, best = proj, dp
            current = proj
        trace.append(best)
    return AttackOutcome(True, incumbent, spent(), it, trace)
