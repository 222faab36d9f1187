import numpy as np
import pytest

from tabadv.coherence import ConstraintSet
from tabadv.metrics import (
    EffortModel, LedgerRow, RunLedger, l0, l2, overall_success_rate, query_stats, success_rates,
    time_query_attack, time_transfer_attack,
)


def ledger(kind, flags, queries=None):
    rows = []
    for i, f in enumerate(flags):
        sur, tgt = f if kind == "transfer" else (None, f)
        q = (queries[i] if queries else int(bool(sur)) if kind == "transfer" else 10)
        rows.append(LedgerRow(i, np.zeros(2), np.zeros(2), bool(tgt), q, sur))
    return RunLedger("a", kind, rows)


class TestNorms:
    def test_identical(self):
        assert l0([1, 2], [1, 2]) == 0 and l2([1, 2], [1, 2]) == 0

    def test_345(self):
        assert l2([0, 0], [3, 4]) == 5.0

    def test_tolerance(self):
        assert l0([1.0, 2.0], [1.0 + 1e-15, 2.0]) == 0

    def test_mismatch(self):
        with pytest.raises(ValueError):
            l0([1], [1, 2])
        with pytest.raises(ValueError):
            l2([1], [1, 2])

    def test_rounded(self):
        c = ConstraintSet(np.zeros(2), np.full(2, 5.0), ("integer", "continuous"))
        assert l0([1.0, 1.0], [1.2, 1.0], c) == 0
        assert l0([1.0, 1.0], [1.6, 1.0], c) == 1

    def test_bound_on_attack(self, constraints, synth, rng):
        from tabadv.coherence import tabular_modify

        x = synth.rows[0]
        bound = constraints.n_features - len(constraints.immutable)
        for _ in range(100):
            z = tabular_modify(x, x + rng.normal(size=x.size) * 50, constraints)
            assert l0(x, z, constraints) <= bound


class TestRates:
    def test_paper_row(self):
        assert overall_success_rate(0.989, 0.139) == pytest.approx(0.137, abs=0.001)

    def test_all_fail(self):
        r = success_rates(ledger("transfer", [(False, False)] * 4))
        assert r["sr"] == 0 and r["transfer_sr"] is None

    def test_half(self):
        r = success_rates(ledger("query", [True] * 5 + [False] * 5))
        assert r["sr"] == 0.5 and r["surrogate_sr"] is None

    def test_identity(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 60))
            sur = rng.random(n) < rng.random()
            tgt = sur & (rng.random(n) < rng.random())
            r = success_rates(ledger("transfer", list(zip(sur, tgt))))
            if r["transfer_sr"] is not None:
                assert abs(r["overall_sr"] - r["surrogate_sr"] * r["transfer_sr"]) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            success_rates(RunLedger("a", "query"))


class TestQueries:
    def test_ones(self):
        assert query_stats(ledger("query", [True] * 3, [1, 1, 1]))["mean"] == 1

    def test_transfer_budget(self, rng):
        flags = [(bool(s), bool(s and t)) for s, t in rng.random((30, 2)) < 0.5]
        assert query_stats(ledger("transfer", flags))["max"] <= 1

    def test_two(self):
        s = query_stats(ledger("query", [True, True], [100, 300]))
        assert s["mean"] == 200 and s["median"] == 200

    def test_empty(self):
        with pytest.raises(ValueError):
            query_stats(RunLedger("a", "query"))


class TestEffort:
    def test_unit(self):
        assert time_query_attack(EffortModel(1, 1, 1, 1)) == 1

    def test_m_zero(self):
        assert time_transfer_attack(EffortModel(0, 0.5, 3, 2, t_surrogate=7)) == 7.5

    def test_square(self):
        a = time_query_attack(EffortModel(10, 0.1, 2, 3))
        b = time_query_attack(EffortModel(10, 0.2, 2, 3))
        assert b == pytest.approx(4 * a, rel=1e-12)

    def test_negative(self):
        with pytest.raises(ValueError):
            EffortModel(-1, 1)
