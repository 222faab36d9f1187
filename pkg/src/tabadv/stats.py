"""Nonparametric tests, Holm correction and effect sizes.

Exact null distributions are computed by dynamic programming over
doubled mid-ranks, so ties are handled exactly. Two-sided p-values use
the rule P(|T - E[T]| >= |t - E[T]|).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import asin, sqrt

import numpy as np
from scipy.special import ndtr
from scipy.stats import binom, rankdata

ALPHA = 0.05
EXACT_MAX_N = 20
THRESHOLDS = {
    "cliffs_delta": (0.147, 0.33, 0.474),
    "cohens_h": (0.2, 0.5, 0.8),
    "cohens_g": (0.05, 0.15, 0.25),
    "rank_biserial": (0.1, 0.3, 0.5),
}
_EPS = 1e-9


@dataclass(frozen=True)
class StatResult:
    test: str
    statistic: float
    p_raw: float
    effect_value: float
    effect_kind: str
    p_adjusted: float = None
    category: str = None
    significant: bool = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        p_adj = self.p_raw if self.p_adjusted is None else self.p_adjusted
        if p_adj < self.p_raw:
            raise ValueError("adjusted p-value below the raw p-value")
        object.__setattr__(self, "p_adjusted", p_adj)
        object.__setattr__(self, "significant", bool(p_adj < ALPHA))
        if self.category is None:
            object.__setattr__(self, "category", effect_size_category(self.effect_value, self.effect_kind))

    def to_dict(self) -> dict:
        d = {
            "test": self.test,
            "statistic": self.statistic,
            "p_raw": self.p_raw,
            "p_adjusted": self.p_adjusted,
            "significant": self.significant,
            "effect_kind": self.effect_kind,
            "effect_value": self.effect_value,
            "category": self.category,
        }
        d.update(self.extra)
        return d


def effect_size_category(value, kind) -> str:
    """S/M/L bucket by |value|; anything under the medium cutoff is S."""
    if kind not in THRESHOLDS:
        raise ValueError(f"unknown effect size kind {kind!r}")
    v = abs(float(value))
    if not np.isfinite(v):
        raise ValueError("effect size must be finite")
    _, m, large = THRESHOLDS[kind]
    if v >= large:
        return "L"
    if v >= m:
        return "M"
    return "S"


def _two_sided(dist_values, dist_counts, observed, center):
    dev = abs(observed - center)
    mask = np.abs(dist_values - center) >= dev - _EPS * max(1.0, dev)
    return float(min(1.0, dist_counts[mask].sum() / dist_counts.sum()))


def _subset_sum_counts(weights, k=None):
    """Counts of subset sums of integer ``weights`` (of size ``k`` if given)."""
    total = int(sum(weights))
    if k is None:
        dp = np.zeros(total + 1)
        dp[0] = 1.0
        for w in weights:
            dp[w:] = dp[w:] + dp[: dp.size - w].copy()
        return dp
    dp = np.zeros((k + 1, total + 1))
    dp[0, 0] = 1.0
    for w in weights:
        dp[1:, w:] = dp[1:, w:] + dp[:-1, : total + 1 - w].copy()
    return dp[k]


def mann_whitney_u(x, y, exact=None) -> StatResult:
    """Two-sided Mann-Whitney U with Cliff's delta.

    Exact permutation p-value when both groups have at most 20
    observations, tie-corrected normal approximation with continuity
    correction otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValueError("empty input")
    gt = float(np.sum(x[:, None] > y[None, :]))
    lt = float(np.sum(x[:, None] < y[None, :]))
    delta = (gt - lt) / (n1 * n2)
    ranks = rankdata(np.concatenate([x, y]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mu = n1 * n2 / 2.0
    N = n1 + n2
    if exact is None:
        exact = max(n1, n2) <= EXACT_MAX_N
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _subset_sum_counts(doubled, n1)
        sums = np.arange(counts.size) / 2.0 - n1 * (n1 + 1) / 2
        p = _two_sided(sums, counts, u, mu)
        method = "exact"
    else:
        _, t = np.unique(ranks, return_counts=True)
        var = n1 * n2 / 12.0 * ((N + 1) - np.sum(t**3 - t) / (N * (N - 1)))
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(u - mu) - 0.5, 0.0) / sqrt(var)
            p = float(min(1.0, 2 * ndtr(-z)))
        method = "normal"
    return StatResult("mann_whitney_u", u, p, delta, "cliffs_delta",
                      extra={"n1": n1, "n2": n2, "method": method})


def proportions_ztest(k1, n1, k2, n2) -> StatResult:
    """Pooled two-sided z-test for two proportions, with Cohen's h."""
    if n1 < 1 or n2 < 1:
        raise ValueError("group sizes must be >= 1")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("counts must lie in [0, n]")
    p1, p2 = k1 / n1, k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    se = sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    if se == 0:
        z, p = 0.0, 1.0
    else:
        z = (p1 - p2) / se
        p = float(min(1.0, 2 * ndtr(-abs(z))))
    h = 2 * asin(sqrt(p1)) - 2 * asin(sqrt(p2))
    return StatResult("proportions_ztest", z, p, h, "cohens_h",
                      extra={"n1": n1, "n2": n2, "p1": p1, "p2": p2})


def mcnemar_exact(b, c, doubled=False) -> StatResult:
    """Exact McNemar test on the discordant counts, with Cohen's g.

    g = max(b, c) / (b + c) - 1/2 lies in [0, 1/2]; the doubled variant
    (range [0, 1]) is reported alongside as ``doubled_g``. The S/M/L
    category uses g unless ``doubled`` is set.
    """
    b, c = int(b), int(c)
    if b < 0 or c < 0:
        raise ValueError("counts must be non-negative")
    n = b + c
    if n == 0:
        raise ValueError("no discordant pairs")
    p = float(min(1.0, 2 * binom.cdf(min(b, c), n, 0.5)))
    g = max(b, c) / n - 0.5
    cat = effect_size_category(2 * g if doubled else g, "cohens_g")
    return StatResult("mcnemar_exact", float(min(b, c)), p, g, "cohens_g", category=cat,
                      extra={"b": b, "c": c, "doubled_g": 2 * g, "category_from": "doubled_g" if doubled else "g"})


def wilcoxon_signed_rank(diffs, exact=None) -> StatResult:
    """Two-sided Wilcoxon signed-rank test with rank-biserial correlation.

    Zero differences are dropped; tied |differences| share averaged ranks.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    total = w_plus + w_minus
    r = (w_plus - w_minus) / total
    center = total / 2.0
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _subset_sum_counts(doubled)
        sums = np.arange(counts.size) / 2.0
        p = _two_sided(sums, counts, w_plus, center)
        method = "exact"
    else:
        _, t = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(t**3 - t) / 48.0
        z = max(abs(w_plus - center) - 0.5, 0.0) / sqrt(var)
        p = float(min(1.0, 2 * ndtr(-z)))
        method = "normal"
    return StatResult("wilcoxon_signed_rank", w_plus, p, r, "rank_biserial",
                      extra={"n": n, "w_minus": w_minus, "method": method})


def holm_adjust(p) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = (m - np.arange(m)) * p[order]
    adj = np.minimum(np.maximum.accumulate(scaled), 1.0)
    out = np.empty(m)
    out[order] = adj
    return out


def adjust_family(results: list) -> list:
    """Holm-adjust a family of StatResults together."""
    if not results:
        return []
    adj = holm_adjust([r.p_raw for r in results])
    return [replace(r, p_adjusted=float(max(a, r.p_raw)), significant=None) for r, a in zip(results, adj)]


def any_significant(results: list) -> bool:
    """Heterogeneity flag: some Holm-adjusted pairwise comparison is significant."""
    return any(r.significant for r in adjust_family(results))


def cohens_h(p1, p2) -> float:
    return 2 * asin(sqrt(p1)) - 2 * asin(sqrt(p2))


__all__ = [
    "StatResult", "effect_size_category", "mann_whitney_u", "proportions_ztest",
    "mcnemar_exact", "wilcoxon_signed_rank", "holm_adjust", "adjust_family",
    "any_significant", "cohens_h", "THRESHOLDS",
]
