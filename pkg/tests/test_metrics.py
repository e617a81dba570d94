import math

import numpy as np
import pytest

from app.services.errors import ConfigError, DimensionError, ScheduleMismatchError
from app.services.inversion import SPDInvConfig, invert
from app.services.metrics import GapReport, coupling_score, edit_divergence, noise_gap, reconstruction_gap
from app.services.predictor import NULL, ZeroPredictor
from app.services.sampler import generate
from app.services.schedule import build_linear_schedule


def test_noise_gap_of_identical_paths_is_zero(mixture, schedule, rng):
    truth = generate(rng.standard_normal(2), 0, mixture, schedule)
    gap = noise_gap(truth, truth)
    assert gap.shape == (51,)
    np.testing.assert_array_equal(gap, np.zeros(51))


def test_noise_gap_starts_at_zero_for_inversion_of_truth(mixture, schedule, rng):
    truth = generate(rng.standard_normal(2), 1, mixture, schedule)
    inverted = invert(truth.z0, 1, mixture, schedule, SPDInvConfig(method="naive"))
    gap = noise_gap(truth, inverted)
    assert gap[0] == 0.0
    assert gap[-1] > 0.0


def test_noise_gap_refuses_other_schedule(mixture, schedule, rng):
    other = build_linear_schedule(1000, 1e-4, 3e-2, 50)
    truth = generate(rng.standard_normal(2), NULL, mixture, schedule)
    elsewhere = generate(rng.standard_normal(2), NULL, mixture.with_schedule(other), other)
    with pytest.raises(ScheduleMismatchError):
        noise_gap(truth, elsewhere)


def test_noise_gap_refuses_other_dimension(mixture, schedule, rng):
    truth = generate(rng.standard_normal(2), NULL, mixture, schedule)
    wider = generate(rng.standard_normal(3), NULL, ZeroPredictor(3), schedule)
    with pytest.raises(DimensionError):
        noise_gap(truth, wider)


def test_reconstruction_gap_values():
    assert reconstruction_gap([1.0, -2.0], [1.0, -2.0]) == (0.0, math.inf)
    mse, psnr = reconstruction_gap([1.0, -2.0], [1.0, -1.0])
    assert mse == pytest.approx(0.5)
    assert psnr == pytest.approx(10.0 * math.log10(8.0))
    assert reconstruction_gap([0.0, 0.0], [0.1, 0.0])[1] == -math.inf


def test_edit_divergence(mixture, schedule, rng):
    z_star = rng.standard_normal(2)
    assert edit_divergence(z_star, z_star, 1, mixture, schedule) == 0.0
    z_hat = z_star + 0.3
    value = edit_divergence(z_star, z_hat, 1, mixture, schedule, w=2.0)
    assert value > 0.0
    reference = generate(z_star, 1, mixture, schedule, 2.0).z0
    assert edit_divergence(z_star, z_hat, 1, mixture, schedule, 2.0, reference=reference) == value


def test_coupling_sign_follows_the_condition(mixture):
    z = np.array([3.0, 3.0])
    assert coupling_score(z, 0, mixture) > 0.0
    assert coupling_score(z, 1, mixture) < 0.0
    assert coupling_score(z, NULL, mixture) == 0.0


def test_coupling_needs_a_mixture(linear_model):
    with pytest.raises(ConfigError) as err:
        coupling_score(np.zeros(2), 0, linear_model)
    assert err.value.field == "predictor"


def test_true_noise_carries_almost_no_condition_information(mixture, schedule):
    rng = np.random.default_rng(314)
    a = schedule.alpha_bar[-1]
    x0 = mixture.sample(1000, rng, 0)
    noisy = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * rng.standard_normal(x0.shape)
    scores = np.array([coupling_score(z, 0, mixture) for z in noisy])
    standard_error = scores.std(ddof=1) / math.sqrt(scores.size)
    assert abs(scores.mean()) < 3.0 * standard_error


def test_gap_report_serializes_every_field():
    report = GapReport(method="spdinv", config={"max_rounds": 25}, predictor={"kind": "zero"})
    data = report.to_dict()
    assert data["method"] == "spdinv"
    assert data["per_step_gap"] == []
    assert set(data) == set(report.__dataclass_fields__)
