import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tabadv.coherence import ConstraintSet, fit_dependency_models
from tabadv.learners.nn import TrainConfig, train_surrogate
from tabadv.learners.trees import fit_gradient_boosting, fit_random_forest
from tabadv.schema import train_test_split
from tabadv.synthetic import make_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth():
    return make_synthetic(1200, seed=3)


@pytest.fixture(scope="session")
def split(synth):
    return train_test_split(synth, 0.75, seed=0)


@pytest.fixture(scope="session")
def gb(split):
    return fit_gradient_boosting(split[0], n_estimators=40, max_depth=3, learning_rate=0.2, seed=0)


@pytest.fixture(scope="session")
def rf(split):
    return fit_random_forest(split[0], n_estimators=20, max_depth=6, seed=0)


@pytest.fixture(scope="session")
def surrogate(split):
    return train_surrogate(split[0], ((64, "relu"), (16, "linear")), TrainConfig(epochs=30, seed=0))


@pytest.fixture(scope="session")
def registry(split):
    dep = split[0].schema.dependent_indices
    return fit_dependency_models(split[0], dep, n_estimators=40, max_depth=4, learning_rate=0.3, seed=0)


@pytest.fixture(scope="session")
def constraints(synth):
    return ConstraintSet.from_schema(synth.schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  C{n:<2d} {text}")
