import warnings

import numpy as np
import pytest

from mixfl import data
from mixfl.losses import LogisticDevice, QuadraticDevice
from mixfl.model import MixtureProblem


def logistic_problem(rng, n=2, m=2, d=2, lam=0.7, mu=0.1, ms=None):
    ms = ms or [m] * n
    devs = [LogisticDevice(rng.standard_normal((mi, d)), rng.choice([-1.0, 1.0], mi), mu) for mi in ms]
    return MixtureProblem(devs, lam, weighting="sample" if len(set(ms)) > 1 else "device")


def quadratic_problem(rng, n=3, d=2, lam=1.0):
    C = rng.standard_normal((n, d))
    return MixtureProblem([QuadraticDevice(c) for c in C], lam), C


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def a1a_problem():
    ds = data.normalize_rows(data.a1a_dataset())
    part = data.split(ds, 5, "homogeneous", 0)
    return MixtureProblem(data.logistic_devices(ds, part, 1e-4), 0.1)


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="initial blocks differ")
        yield


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
