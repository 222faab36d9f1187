"""Decision-based boundary attack for constrained tabular inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabadv.attacks.base import AttackOutcome, InitFailed, InvalidStart, free_mask, l2
from tabadv.coherence import tabular_modify


@dataclass
class BoundaryConfig:
    epsilon: float = 1.0
    delta: float = 1.0
    max_iter: int = 3000
    num_trials: int = 20
    step_adaptation: float = 1.0
    max_init_steps: int = 1000
    alpha_sim: float = 1.0
    init_mean: np.ndarray | None = None
    init_std: np.ndarray | None = None
    min_step: float = 1e-6

    def __post_init__(self):
        for name in ("epsilon", "delta", "step_adaptation", "alpha_sim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_iter", "num_trials", "max_init_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def similarity(x, x_adv) -> float:
    """1 minus the L2 distance normalised by the norm of ``x``."""
    nx = float(np.linalg.norm(x))
    return 1.0 - l2(x, x_adv) / (nx if nx > 0 else 1.0)


def _sphere_step(x, x_adv, delta, rng, mask=None):
    diff = x - x_adv
    dist = float(np.sqrt(diff @ diff))
    if dist == 0.0:
        raise ValueError("zero-distance pair: x and x_adv coincide")
    eta = rng.standard_normal(x.size)
    if mask is not None:
        eta = np.where(mask, eta, 0.0)
    n = np.linalg.norm(eta)
    if n > 0:
        eta *= delta * dist / n
    u = diff / dist
    eta -= (eta @ u) * u
    p = x_adv + eta
    off = p - x
    return x + off * (dist / np.linalg.norm(off))


def orthogonal_perturbation(x, x_adv, delta, epsilon, rng, mask=None, return_sphere=False):
    """Two-step boundary-attack move.

    A random direction orthogonal to ``x - x_adv`` of length
    ``delta * ||x - x_adv||`` is added, the result is put back on the
    sphere of radius ``||x - x_adv||`` around ``x``, and the point is then
    contracted toward ``x`` by the fraction ``epsilon / (1 + epsilon)``.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    sphere = _sphere_step(x, x_adv, delta, rng, mask)
    frac = epsilon / (1.0 + epsilon)
    cand = sphere + frac * (x - sphere)
    if not np.all(np.isfinite(cand)):
        raise FloatingPointError("non-finite candidate")
    return (cand, sphere) if return_sphere else cand


def random_seed_point(x, c, reg, m, y, mean, std, rng, max_steps):
    """Draw projected N(mean, std^2) points until one is misclassified."""
    for _ in range(max_steps):
        cand = tabular_modify(x, mean + std * rng.standard_normal(x.size), c, reg)
        if m.predict(cand) != y:
            return cand
    raise InitFailed("no misclassified starting point found")


def boundary_attack(m, x, y, cfg: BoundaryConfig, c, reg=None, rng=None) -> AttackOutcome:
    """Boundary attack against black-box handle ``m``.

    Every accepted iterate is a projected (valid) sample that is
    misclassified and strictly closer to ``x`` than the previous one, so
    ``l2_trace`` is strictly decreasing.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    start = m.queries
    if m.predict(x) != y:
        raise InvalidStart("model does not predict the true label on x")
    mean = x if cfg.init_mean is None else np.asarray(cfg.init_mean, dtype=np.float64)
    std = np.ones_like(x) if cfg.init_std is None else np.asarray(cfg.init_std, dtype=np.float64)
    mask = free_mask(c, reg)

    x_adv = random_seed_point(x, c, reg, m, y, mean, std, rng, cfg.max_init_steps)
    best = l2(x, x_adv)
    trace = [best]
    delta, eps = cfg.delta, cfg.epsilon
    factor = 1.0 + 0.5 * cfg.step_adaptation
    it = 0
    while it < cfg.max_iter and best > 0 and similarity(x, x_adv) < cfg.alpha_sim:
        it += 1
        cands = np.array([orthogonal_perturbation(x, x_adv, delta, eps, rng, mask)
                          for _ in range(cfg.num_trials)])
        adv = m.predict(cands) != y
        rate = adv.mean()
        if rate > 0.5:
            delta *= factor
            eps *= factor
        elif rate < 0.2:
            delta /= factor
            eps /= factor
        if adv.any():
            pool = cands[adv]
            d = np.linalg.norm(pool - x, axis=1)
            k = int(np.argmin(d))
            if d[k] < best:
                proj = tabular_modify(x, pool[k], c, reg)
                dp = l2(x, proj)
                if dp < best and m.predict(proj) != y:
                    x_adv, best = proj, dp
                    trace.append(best)
        if max(delta, eps) < cfg.min_step:
            break
    return AttackOutcome(True, x_adv, m.queries - start, it, trace)
