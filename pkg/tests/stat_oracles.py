"""Brute-force reference implementations for the exact tests."""

import itertools
from math import comb

import numpy as np
from scipy.stats import rankdata

EPS = 1e-9


def mw_enumerated_p(x, y):
    pooled = np.concatenate([x, y])
    r = rankdata(pooled)
    n1 = len(x)
    mu = n1 * len(y) / 2.0
    obs = r[:n1].sum() - n1 * (n1 + 1) / 2
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        u = r[list(idx)].sum() - n1 * (n1 + 1) / 2
        hits += abs(u - mu) >= abs(obs - mu) - EPS
        total += 1
    return hits / total


def wilcoxon_enumerated_p(d):
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    r = rankdata(np.abs(d))
    center = r.sum() / 2
    obs = r[d > 0].sum()
    hits = total = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        w = r[np.array(signs, dtype=bool)].sum()
        hits += abs(w - center) >= abs(obs - center) - EPS
        total += 1
    return hits / total


def mcnemar_binomial_p(b, c):
    n = b + c
    tail = sum(comb(n, i) for i in range(min(b, c) + 1)) / 2**n
    return min(1.0, 2 * tail)
