import numpy as np
import pytest

from app.services.errors import ConfigError
from app.services.mlp_denoiser import PARAMETER_NAMES, MlpDenoiser, TrainingConfig, time_embedding, train_mlp
from tests.conftest import central_jacobian, relative_error


@pytest.fixture(scope="module")
def dataset(mixture):
    points, labels = mixture.sample_labeled(600, np.random.default_rng(11))
    return list(zip(points, labels))


def test_time_embedding_shape_and_range():
    features = time_embedding(np.array([0.0, 0.5, 1.0]), 3)
    assert features.shape == (3, 6)
    np.testing.assert_allclose(features[0], [0, 0, 0, 1, 1, 1], atol=1e-15)
    assert np.all(np.abs(features) <= 1.0)


def test_training_reduces_held_out_loss(dataset, schedule):
    model = train_mlp(dataset, schedule, epochs=12, seed=5, hidden=32)
    history = model.history
    assert len(history["epoch_losses"]) == 12
    assert history["final_loss"] < history["initial_loss"]
    assert model.labels == (0, 1)
    assert model.training["hidden"] == 32


def test_training_is_deterministic_per_seed(dataset, schedule):
    first = train_mlp(dataset, schedule, epochs=2, seed=3, hidden=16)
    second = train_mlp(dataset, schedule, epochs=2, seed=3, hidden=16)
    other = train_mlp(dataset, schedule, epochs=2, seed=4, hidden=16)
    for name in PARAMETER_NAMES:
        np.testing.assert_array_equal(first.params[name], second.params[name])
    assert not np.array_equal(first.params["w1"], other.params["w1"])


def test_zero_epochs_keeps_initial_loss(dataset, schedule):
    model = train_mlp(dataset, schedule, epochs=0, seed=1, hidden=8)
    assert model.history["epoch_losses"] == []
    assert model.history["final_loss"] == model.history["initial_loss"]
    untrained = MlpDenoiser.initialize(2, model.labels, schedule, np.random.default_rng(1), hidden=8)
    for name in PARAMETER_NAMES:
        np.testing.assert_array_equal(model.params[name], untrained.params[name])


def test_trained_model_vjp_matches_finite_differences(dataset, schedule, rng):
    model = train_mlp(dataset, schedule, epochs=3, seed=2, hidden=16)
    for c in (None, 0, 1):
        z = rng.standard_normal(2)
        v = rng.standard_normal(2)
        jacobian = central_jacobian(lambda x: model.predict(x, 25, c), z)
        assert relative_error(model.vjp(z, 25, c, v), jacobian.T @ v) < 1e-3


def test_empty_dataset_rejected(schedule):
    with pytest.raises(ConfigError) as err:
        train_mlp([], schedule)
    assert err.value.field == "dataset"


@pytest.mark.parametrize("options", [
    {"cond_dropout": 1.0},
    {"batch_size": 0},
    {"momentum": 1.5},
    {"epochs": -1},
])
def test_training_config_validation(options):
    with pytest.raises(ConfigError):
        TrainingConfig(**options)
