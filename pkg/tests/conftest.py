import numpy as np
import pytest

from app.services.gaussian_mixture import GaussianMixtureModel, default_mixture
from app.services.linear_model import LinearModel
from app.services.predictor import ZeroPredictor
from app.services.schedule import build_linear_schedule


def central_jacobian(fn, z, h=1e-5):
    """Column i is (fn(z + h e_i) - fn(z - h e_i)) / 2h"""
    z = np.asarray(z, dtype=np.float64)
    columns = []
    for i in range(z.size):
        step = np.zeros_like(z)
        step[i] = h
        columns.append((fn(z + step) - fn(z - step)) / (2.0 * h))
    return np.stack(columns, axis=1)


def central_gradient(fn, z, h=1e-5):
    """Gradient of a scalar function by central differences"""
    z = np.asarray(z, dtype=np.float64)
    grad = np.zeros_like(z)
    for i in range(z.size):
        step = np.zeros_like(z)
        step[i] = h
        grad[i] = (fn(z + step) - fn(z - step)) / (2.0 * h)
    return grad


def relative_error(actual, expected):
    return float(np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule(1000, 1e-4, 2e-2, 50)


@pytest.fixture(scope="session")
def short_schedule():
    return build_linear_schedule(1000, 1e-4, 2e-2, 10)


@pytest.fixture(scope="session")
def mixture(schedule):
    return default_mixture(schedule)


@pytest.fixture
def zero_predictor():
    return ZeroPredictor(2)


@pytest.fixture
def linear_model(short_schedule):
    return LinearModel(0.5 * np.eye(2), [0.1, -0.1], short_schedule)


@pytest.fixture
def random_mixture(schedule):
    generator = np.random.default_rng(7)
    means = 2.0 * generator.standard_normal((3, 4))
    return GaussianMixtureModel(means, [0.2, 0.3, 0.5], 0.5, schedule, {0: [0, 1], 1: [2]})
