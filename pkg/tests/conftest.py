import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bridgesim import (
    BridgeProblem, ExprCoefficient, GeneralModel, LinearModel, make_uniform_grid,
)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def expr_model(b, sigma, d=1, bounded=False):
    return GeneralModel(ExprCoefficient(b, d), ExprCoefficient(sigma, d), d, bounded)


@pytest.fixture
def brownian_general():
    return expr_model(["0"], [["1"]], bounded=True)


@pytest.fixture
def brownian_linear():
    return LinearModel([[0.0]], [0.0], [[1.0]])


@pytest.fixture
def ou_linear():
    return LinearModel([[-1.0]], [0.0], [[1.0]])


@pytest.fixture
def unit_problem():
    return BridgeProblem([0.0], [1.0], 1.0)


@pytest.fixture
def grid100():
    return make_uniform_grid(1.0, 100)


def mc_close(estimate, truth, se, k=3.0):
    """``|estimate - truth| < k * se`` elementwise."""
    return bool(np.all(np.abs(np.asarray(estimate) - np.asarray(truth)) < k * np.asarray(se)))


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return x.mean(axis=0), x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])


def cov_se(a, b):
    """Sample covariance of two samples and the standard error of that estimator."""
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    prod = a * b
    n = prod.size
    return prod.sum() / (n - 1), prod.std(ddof=1) / np.sqrt(n)


def agree(est1, se1, est2, se2, k=3.0):
    """Two independent estimates agree within ``k`` combined standard errors."""
    return mc_close(est1, est2, np.hypot(se1, se2), k)
