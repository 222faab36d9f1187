import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tabadv.coherence import ConstraintSet, DependencyRegistry, fit_dependency_models, tabular_modify
from tabadv.schema import Dataset, FeatureSpec, Schema


def simple_set(immutable=()):
    return ConstraintSet(np.array([0.0, 0.0, 0.0, 0.0]), np.array([1.0, 1.0, 10.0, 3.0]),
                         ("continuous", "binary", "integer", "categorical"), frozenset(immutable))


def bmi_dataset(rng, n=1500):
    weight = rng.uniform(45, 120, n)
    height = rng.uniform(1.5, 2.0, n)
    bmi = weight / height**2
    schema = Schema(
        (
            FeatureSpec("weight", "continuous", 40, 130),
            FeatureSpec("height", "continuous", 1.4, 2.1),
            FeatureSpec("bmi", "continuous", 5, 70, dependent=True),
        ),
        "y", 2,
    )
    return Dataset(schema, np.column_stack([weight, height, bmi]), (bmi > 25).astype(int))


class TestExamples:
    def test_immutable_restored(self):
        c = simple_set(immutable=[2])
        x = np.array([0.5, 0.0, 3.0, 1.0])
        z = tabular_modify(x, np.array([0.5, 0.0, 7.1, 1.0]), c)
        assert z[2] == 3.0

    def test_binary_rounds(self):
        c = simple_set()
        z = tabular_modify(np.zeros(4), np.array([0.2, 0.7, 0.0, 0.0]), c)
        assert z[1] == 1.0

    def test_clip(self):
        c = simple_set()
        z = tabular_modify(np.zeros(4), np.array([1.5, 0.0, 0.0, 0.0]), c)
        assert z[0] == 1.0

    def test_immutable_not_rounded(self):
        # original immutable value comes back bit-exact even if off-grid
        c = ConstraintSet(np.zeros(2), np.full(2, 10.0), ("continuous", "continuous"), frozenset([0]))
        x = np.array([0.1 + 0.2, 5.0])
        assert tabular_modify(x, np.array([9.0, 9.0]), c)[0] == x[0]

    def test_nonfinite_input(self):
        c = simple_set()
        x = np.array([0.5, 1.0, 2.0, 1.0])
        z = tabular_modify(x, np.array([np.nan, np.inf, -np.inf, 1.0]), c)
        assert c.violations(z) == 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tabular_modify(np.zeros(3), np.zeros(3), simple_set())

    def test_bad_set(self):
        with pytest.raises(ValueError):
            ConstraintSet(np.array([1.0]), np.array([0.0]), ("continuous",))
        with pytest.raises(ValueError):
            ConstraintSet(np.array([0.0]), np.array([1.0]), ("continuous",), frozenset([3]))


class TestRegistry:
    def test_empty(self, synth):
        reg = fit_dependency_models(synth, [])
        assert len(reg) == 0
        x = synth.rows[0]
        c = ConstraintSet.from_schema(synth.schema)
        z = x + 0.3
        assert np.array_equal(tabular_modify(x, z, c, reg), tabular_modify(x, z, c))

    def test_all_dependent(self, rng):
        with pytest.raises(ValueError, match="all features"):
            fit_dependency_models(rng.normal(size=(20, 2)), [0, 1])

    def test_unflagged(self, synth):
        with pytest.raises(ValueError, match="not flagged dependent"):
            fit_dependency_models(synth, [2])

    def test_bmi_r2(self, rng):
        ds = bmi_dataset(rng)
        train, test = ds.take(np.arange(1200)), ds.take(np.arange(1200, 1500))
        reg = fit_dependency_models(train, [2], n_estimators=200, max_depth=6, learning_rate=0.1)
        pred = reg.predict(test.rows)[2]
        truth = test.rows[:, 0] / test.rows[:, 1] ** 2
        r2 = 1 - np.sum((pred - truth) ** 2) / np.sum((truth - truth.mean()) ** 2)
        assert r2 >= 0.95

    def test_consistency_band(self, rng):
        ds = bmi_dataset(rng)
        reg = fit_dependency_models(ds, [2], n_estimators=200, max_depth=6, learning_rate=0.1)
        held = bmi_dataset(np.random.default_rng(99), 400)
        err = np.abs(reg.predict(held.rows)[2] - held.rows[:, 2])
        band = np.quantile(err, 0.99)
        c = ConstraintSet.from_schema(ds.schema)
        x = held.rows[0]
        z = tabular_modify(x, np.array([80.0, 1.75, 0.0]), c, reg)
        assert abs(z[2] - 80.0 / 1.75**2) <= band

    def test_registry_layout(self, split):
        dep = split[0].schema.dependent_indices
        reg = fit_dependency_models(split[0], dep, n_estimators=3)
        assert set(reg.inputs.tolist()).isdisjoint(dep)
        with pytest.raises(ValueError):
            DependencyRegistry(dict(reg.models), (), split[0].schema.n_features)


class TestProperties:
    @given(arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)))
    def test_plain_is_clip_round(self, z):
        c = simple_set()
        out = tabular_modify(np.zeros(4), z, c)
        ref = np.clip(z, c.lower, c.upper)
        ref[1:] = np.floor(ref[1:] + 0.5)
        assert np.array_equal(out, ref)

    @given(seed=st.integers(0, 2**31))
    def test_idempotent_and_valid(self, synth, registry, constraints, seed):
        rng = np.random.default_rng(seed)
        x = synth.rows[int(rng.integers(len(synth)))]
        scale = constraints.upper - constraints.lower
        Z = x + rng.normal(size=(50, x.size)) * scale * rng.uniform(0, 2)
        out = tabular_modify(x, Z, constraints, registry)
        again = tabular_modify(x, out, constraints, registry)
        assert np.array_equal(out, again)
        assert constraints.violations(out) == 0
        imm = list(constraints.immutable)
        assert np.array_equal(out[:, imm], np.broadcast_to(x[imm], (50, len(imm))))

    def test_batch_matches_single(self, synth, registry, constraints, rng):
        x = synth.rows[3]
        Z = x + rng.normal(size=(20, x.size)) * 20
        batch = tabular_modify(x, Z, constraints, registry)
        for z, b in zip(Z, batch):
            assert np.array_equal(tabular_modify(x, z, constraints, registry), b)

    def test_clamps(self, synth):
        c = ConstraintSet.from_schema(synth.schema, clamps={2: (10.0, 150.0)})
        x = synth.rows[0]
        z = x.copy()
        z[2] = 190.0
        assert tabular_modify(x, z, c)[2] == 150.0
