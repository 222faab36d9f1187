import numpy as np
import pytest

from tabadv.attacks.base import BlackBoxHandle, InitFailed, InvalidStart
from tabadv.attacks.boundary import BoundaryConfig, boundary_attack, orthogonal_perturbation
from tabadv.attacks.hopskipjump import (
    DegenerateProbes, HsjConfig, binary_search_boundary, estimate_update, hopskipjump_attack,
)
from tabadv.coherence import ConstraintSet
from tabadv.learners.trees import Tree, TreeEnsemble, predict


class Linear:
    """class 1 iff w.x + b > 0; counts every row it scores."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=float)
        self.b = b
        self.rows = 0

    def predict_proba(self, X):
        X = np.atleast_2d(X)
        self.rows += X.shape[0]
        return (X @ self.w + self.b > 0).astype(float) * 0.5 + 0.25


def threshold_model():
    return TreeEnsemble((Tree.stump(0, 0.0, 0.0, 1.0),), "random_forest", 1)


def box(d, lo=-5.0, hi=5.0, immutable=()):
    return ConstraintSet(np.full(d, lo), np.full(d, hi), ("continuous",) * d, frozenset(immutable))


class TestHandle:
    def test_counts_rows(self):
        h = BlackBoxHandle(threshold_model())
        h.predict(np.zeros(1))
        h.predict(np.zeros((5, 1)))
        h.predict_proba(np.zeros((2, 1)))
        assert h.queries == 8


class TestOrthogonal:
    def test_zero_distance(self, rng):
        with pytest.raises(ValueError, match="zero-distance"):
            orthogonal_perturbation(np.ones(3), np.ones(3), 1.0, 1.0, rng)

    def test_small_delta_is_contraction(self, rng):
        x = np.zeros(3)
        xa = np.array([3.0, 4.0, 0.0])
        cand = orthogonal_perturbation(x, xa, 1e-12, 1.0, rng)
        assert np.allclose(cand, xa * 0.5, atol=1e-9)

    def test_sphere_radius(self, rng):
        x = rng.normal(size=6)
        xa = x + rng.normal(size=6)
        r = np.linalg.norm(x - xa)
        dev = 0.0
        for _ in range(10_000):
            _, sphere = orthogonal_perturbation(x, xa, float(rng.uniform(0.01, 2)), 1.0, rng,
                                                return_sphere=True)
            dev = max(dev, abs(np.linalg.norm(sphere - x) - r))
        assert dev <= 1e-9

    def test_mask(self, rng):
        x = np.zeros(4)
        xa = np.array([1.0, 1.0, 0.0, 0.0])
        mask = np.array([True, True, True, False])
        for _ in range(50):
            cand = orthogonal_perturbation(x, xa, 0.5, 0.1, rng, mask)
            assert cand[3] == 0.0


class TestBinarySearch:
    def test_threshold(self):
        h = BlackBoxHandle(threshold_model())
        out = binary_search_boundary(h, np.array([-1.0]), np.array([3.0]), 1e-6)
        assert 0 < out[0] <= 1e-6
        assert predict(threshold_model(), out) == 1

    def test_within_tol(self):
        h = BlackBoxHandle(threshold_model())
        xa = np.array([0.1])
        out = binary_search_boundary(h, np.array([-0.05]), xa, 1.0)
        assert np.array_equal(out, xa)

    def test_same_side(self):
        h = BlackBoxHandle(threshold_model())
        with pytest.raises(ValueError, match="same side"):
            binary_search_boundary(h, np.array([-1.0]), np.array([-2.0]), 1e-6)


class TestEstimateUpdate:
    def test_linear_normal(self):
        w = np.array([1.0, 2.0])
        normal = w / np.linalg.norm(w)
        passed = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            h = BlackBoxHandle(Linear(w))
            g = estimate_update(h, np.zeros(2), 500, 0.1, rng, y=0)
            passed += float(g @ normal) > 0.5
        assert passed >= 18

    def test_n_eval(self, rng):
        with pytest.raises(ValueError):
            estimate_update(BlackBoxHandle(Linear([1.0])), np.zeros(1), 1, 0.1, rng, 0)

    def test_degenerate(self, rng):
        h = BlackBoxHandle(Linear([1.0, 0.0], b=100.0))
        with pytest.raises(DegenerateProbes, match="degenerate probes"):
            estimate_update(h, np.zeros(2), 50, 0.1, rng, y=0)


class TestBoundary:
    def test_invalid_start(self):
        h = BlackBoxHandle(threshold_model())
        with pytest.raises(InvalidStart):
            boundary_attack(h, np.array([1.0]), 0, BoundaryConfig(max_iter=5), box(1))

    def test_threshold(self):
        h = BlackBoxHandle(threshold_model())
        out = boundary_attack(h, np.array([-1.0]), 0, BoundaryConfig(max_iter=200), box(1), rng=0)
        assert out.success and out.x_adv[0] > 0
        assert out.l2_trace[-1] <= out.l2_trace[0]
        assert np.all(np.diff(out.l2_trace) < 0)
        assert out.queries == h.queries

    def test_immutable(self):
        h = BlackBoxHandle(Linear([1.0, 0.0]))
        x = np.array([-1.0, 2.5])
        out = boundary_attack(h, x, 0, BoundaryConfig(max_iter=50), box(2, immutable=[1]), rng=1)
        assert out.x_adv[1] == 2.5

    def test_init_failed(self):
        h = BlackBoxHandle(Linear([1.0], b=-100.0))
        with pytest.raises(InitFailed):
            boundary_attack(h, np.array([-1.0]), 0, BoundaryConfig(max_init_steps=20), box(1), rng=0)

    def test_config(self):
        with pytest.raises(ValueError):
            BoundaryConfig(epsilon=0)
        with pytest.raises(ValueError):
            BoundaryConfig(max_iter=0)

    def test_deterministic(self, gb, split, constraints, registry):
        x = split[1].rows[0]
        y = int(predict(gb, x))
        cfg = BoundaryConfig(max_iter=20)
        a = boundary_attack(BlackBoxHandle(gb), x, y, cfg, constraints, registry, rng=5)
        b = boundary_attack(BlackBoxHandle(gb), x, y, cfg, constraints, registry, rng=5)
        assert np.array_equal(a.x_adv, b.x_adv) and a.queries == b.queries

    def test_real_model(self, gb, split, constraints, registry):
        X = split[1].rows[:5]
        for i, x in enumerate(X):
            y = int(predict(gb, x))
            h = BlackBoxHandle(gb)
            out = boundary_attack(h, x, y, BoundaryConfig(max_iter=30), constraints, registry, rng=i)
            assert predict(gb, out.x_adv) != y
            assert constraints.violations(out.x_adv) == 0
            assert np.all(np.diff(out.l2_trace) < 0)

    def test_query_count_offline(self):
        model = Linear([1.0, -1.0])
        h = BlackBoxHandle(model)
        out = boundary_attack(h, np.array([-1.0, 1.0]), 0, BoundaryConfig(max_iter=40), box(2), rng=3)
        assert out.queries == model.rows


class TestHsj:
    def test_threshold(self):
        h = BlackBoxHandle(threshold_model())
        cfg = HsjConfig(max_iter=10, init_eval=20, max_eval=100)
        out = hopskipjump_attack(h, np.array([-1.0]), 0, cfg, box(1), rng=0)
        assert out.success and out.x_adv[0] > 0
        assert out.l2_trace[-1] <= out.l2_trace[0]
        assert np.all(np.diff(out.l2_trace) <= 0)

    def test_queries(self):
        model = Linear([1.0, 1.0])
        h = BlackBoxHandle(model)
        cfg = HsjConfig(max_iter=5, init_eval=20, max_eval=200)
        out = hopskipjump_attack(h, np.array([-1.0, -1.0]), 0, cfg, box(2), rng=2)
        assert out.queries == h.queries == model.rows

    def test_budget(self):
        h = BlackBoxHandle(Linear([1.0, 1.0]))
        cfg = HsjConfig(max_iter=50, init_eval=20, max_eval=200, query_budget=300)
        out = hopskipjump_attack(h, np.array([-1.0, -1.0]), 0, cfg, box(2), rng=2)
        # the final projected check may exceed the budget by a handful of queries
        assert out.queries <= 300 + 200

    def test_immutable(self):
        h = BlackBoxHandle(Linear([1.0, 0.0]))
        cfg = HsjConfig(max_iter=5, init_eval=20, max_eval=100)
        out = hopskipjump_attack(h, np.array([-1.0, 2.5]), 0, cfg, box(2, immutable=[1]), rng=1)
        assert out.x_adv[1] == 2.5

    def test_invalid_start(self):
        h = BlackBoxHandle(threshold_model())
        with pytest.raises(InvalidStart):
            hopskipjump_attack(h, np.array([1.0]), 0, HsjConfig(), box(1))

    def test_config(self):
        with pytest.raises(ValueError):
            HsjConfig(init_eval=20_000)
        with pytest.raises(ValueError):
            HsjConfig(norm="linf")

    def test_real_model(self, rf, split, constraints, registry):
        cfg = HsjConfig(max_iter=8, init_eval=50, max_eval=400)
        for i, x in enumerate(split[1].rows[:5]):
            y = int(predict(rf, x))
            out = hopskipjump_attack(BlackBoxHandle(rf), x, y, cfg, constraints, registry, rng=i)
            assert predict(rf, out.x_adv) != y
            assert constraints.violations(out.x_adv) == 0
            assert np.all(np.diff(out.l2_trace) <= 0)
