import numpy as np
import pytest

from app.services.errors import ConfigError, DivergenceError
from app.services.inversion import (
    AIDI,
    NAIVE,
    SPDINV,
    SPDInvConfig,
    aidi_step,
    fixed_point_map,
    invert,
    naive_invert_step,
    residual_grad,
    residual_loss,
    spdinv_step,
)
from app.services.linear_model import LinearModel
from app.services.mlp_denoiser import MlpDenoiser
from app.services.predictor import NULL
from app.services.sampler import INVERSION, generate
from app.services.schedule import coefficients, schedule_from_values
from tests.conftest import central_gradient, relative_error


def test_naive_step_formula(mixture, schedule, rng):
    z_prev = rng.standard_normal(2)
    coef = coefficients(schedule, 12)
    expected = coef.c1 * z_prev + coef.c2 * mixture.predict(z_prev, 11, 0)
    np.testing.assert_array_equal(naive_invert_step(z_prev, 12, mixture, 0, schedule), expected)


def test_fixed_point_of_linear_model_has_zero_residual(linear_model, short_schedule, rng):
    z_prev = rng.standard_normal(2)
    z_star = linear_model.solve_fixed_point(z_prev, 6)
    np.testing.assert_allclose(fixed_point_map(z_star, z_prev, 6, linear_model, NULL, short_schedule),
                               z_star, atol=1e-14)
    assert residual_loss(z_star, z_prev, 6, linear_model, NULL, short_schedule) < 1e-14


def test_residual_grad_matches_finite_differences(random_mixture, schedule, rng):
    for t in (3, 20, 45):
        z_prev = rng.standard_normal(4)
        z = rng.standard_normal(4)
        for c, w in ((NULL, 1.0), (0, 1.0), (1, 4.0)):
            numeric = central_gradient(
                lambda x: residual_loss(x, z_prev, t, random_mixture, c, schedule, w), z
            )
            analytic = residual_grad(z, z_prev, t, random_mixture, c, schedule, w)
            assert relative_error(analytic, numeric) < 1e-5


@pytest.mark.parametrize("predictor", ["linear", "mlp"])
def test_residual_grad_on_linear_and_mlp_predictors(predictor, linear_model, short_schedule):
    rng = np.random.default_rng(2024)
    if predictor == "linear":
        model, tolerance = linear_model, 1e-4
    else:
        model = MlpDenoiser.initialize(2, (0, 1), short_schedule, np.random.default_rng(8), hidden=16)
        tolerance = 1e-3
    for _ in range(20):
        t = int(rng.integers(1, short_schedule.total_steps + 1))
        c = NULL if predictor == "linear" else [NULL, 0, 1][int(rng.integers(0, 3))]
        z_prev = rng.standard_normal(2)
        z = z_prev + rng.standard_normal(2)
        numeric = central_gradient(
            lambda x: residual_loss(x, z_prev, t, model, c, short_schedule), z
        )
        analytic = residual_grad(z, z_prev, t, model, c, short_schedule)
        assert relative_error(analytic, numeric) < tolerance


def test_residual_grad_is_zero_at_exact_fixed_point(zero_predictor, schedule, rng):
    z_prev = rng.standard_normal(2)
    z = naive_invert_step(z_prev, 30, zero_predictor, NULL, schedule)
    np.testing.assert_array_equal(residual_grad(z, z_prev, 30, zero_predictor, NULL, schedule),
                                  np.zeros(2))


@pytest.mark.parametrize("method", [NAIVE, SPDINV, AIDI])
def test_zero_predictor_inverts_exactly(method, zero_predictor, schedule, rng):
    z0 = rng.standard_normal(2)
    trajectory = invert(z0, NULL, zero_predictor, schedule, SPDInvConfig(method=method))
    assert trajectory.direction == INVERSION
    np.testing.assert_array_equal(trajectory.final_residuals, np.zeros(50))
    back = generate(trajectory.zT, NULL, zero_predictor, schedule)
    np.testing.assert_allclose(back.z0, z0, rtol=1e-12)
    if method == SPDINV:
        np.testing.assert_array_equal(trajectory.rounds, np.zeros(50))
        np.testing.assert_array_equal(trajectory.predictor_calls, np.full(50, 2))


def test_spdinv_call_accounting(mixture, schedule, rng):
    z_prev = rng.standard_normal(2)
    config = SPDInvConfig(max_rounds=7, threshold=0.0, learning_rate=1e-4)
    result = spdinv_step(z_prev, 25, mixture, 0, schedule, config)
    assert result.rounds == 7
    assert result.predictor_calls == 2 + 2 * 7

    frozen = SPDInvConfig(max_rounds=7, threshold=0.0, learning_rate=1e-4, stop_gradient=True)
    result = spdinv_step(z_prev, 25, mixture, 0, schedule, frozen)
    assert result.rounds == 7
    assert result.predictor_calls == 2 + 7


def test_guided_call_accounting(mixture, schedule, rng):
    z_prev = rng.standard_normal(2)
    config = SPDInvConfig(max_rounds=7, threshold=0.0, learning_rate=1e-4, guidance=3.0)
    assert spdinv_step(z_prev, 25, mixture, 0, schedule, config).predictor_calls == 2 * (2 + 2 * 7)
    frozen = SPDInvConfig(max_rounds=7, threshold=0.0, learning_rate=1e-4, guidance=3.0, stop_gradient=True)
    assert spdinv_step(z_prev, 25, mixture, 0, schedule, frozen).predictor_calls == 2 * (2 + 7)
    assert aidi_step(z_prev, 25, mixture, 0, schedule, 5, w=3.0).predictor_calls == 2 * (5 + 2)
    naive = invert(z_prev, 0, mixture, schedule, SPDInvConfig(method=NAIVE, guidance=3.0))
    np.testing.assert_array_equal(naive.predictor_calls, np.full(50, 4))
    unguided = invert(z_prev, NULL, mixture, schedule, SPDInvConfig(method=NAIVE, guidance=3.0))
    np.testing.assert_array_equal(unguided.predictor_calls, np.full(50, 2))


@pytest.mark.parametrize("learning_rate", [1.0, 50.0])
def test_spdinv_large_learning_rate_trips_the_guard(learning_rate, linear_model, short_schedule):
    config = SPDInvConfig(max_rounds=25, threshold=0.0, learning_rate=learning_rate, inference_steps=10)
    with pytest.raises(DivergenceError) as err:
        spdinv_step(np.array([0.3, -0.2]), 5, linear_model, NULL, short_schedule, config)
    assert err.value.step == 5


def test_default_learning_rate_stays_inside_the_guard(mixture, schedule, rng):
    config = SPDInvConfig(max_rounds=25, threshold=5e-6, learning_rate=0.002)
    for c in (0, 1, 0, 1, 0):
        truth = generate(rng.standard_normal(2), c, mixture, schedule)
        trajectory = invert(truth.z0, c, mixture, schedule, config)
        assert np.all(trajectory.final_residuals <= trajectory.initial_residuals)


def test_spdinv_never_worse_than_naive(random_mixture, schedule, rng):
    config = SPDInvConfig(max_rounds=25, learning_rate=1e-3)
    for t in (1, 10, 40):
        z_prev = rng.standard_normal(4)
        result = spdinv_step(z_prev, t, random_mixture, 1, schedule, config)
        assert result.final_residual <= result.initial_residual
        np.testing.assert_allclose(
            result.final_residual, residual_loss(result.z, z_prev, t, random_mixture, 1, schedule),
            rtol=1e-12,
        )


def test_spdinv_stops_below_threshold(mixture, schedule, rng):
    loose = SPDInvConfig(max_rounds=25, threshold=10.0)
    result = spdinv_step(rng.standard_normal(2), 10, mixture, NULL, schedule, loose)
    assert result.rounds == 0
    assert result.predictor_calls == 2


def test_spdinv_linear_oracle(short_schedule):
    model = LinearModel(0.5 * np.eye(2), [0.1, -0.1], short_schedule)
    z0 = 0.1 * np.random.default_rng(5).standard_normal(2)
    config = SPDInvConfig(max_rounds=10000, threshold=1e-7, learning_rate=5e-5, inference_steps=10)
    trajectory = invert(z0, NULL, model, short_schedule, config)
    for t in range(1, 11):
        exact = model.solve_fixed_point(trajectory.states[t - 1], t)
        assert np.max(np.abs(trajectory.states[t] - exact)) < 1e-4


def test_spdinv_stop_gradient_still_descends(linear_model, short_schedule, rng):
    config = SPDInvConfig(max_rounds=50, threshold=0.0, learning_rate=1e-4, stop_gradient=True)
    result = spdinv_step(rng.standard_normal(2), 8, linear_model, NULL, short_schedule, config)
    assert result.final_residual < result.initial_residual
    assert result.predictor_calls == 2 + 50


def test_aidi_contracts_geometrically_on_linear_model(linear_model, short_schedule, rng):
    z_prev = rng.standard_normal(2)
    t = 10
    c2 = coefficients(short_schedule, t).c2
    result = aidi_step(z_prev, t, linear_model, NULL, short_schedule, 5)
    assert result.rounds == 5
    assert result.predictor_calls == 5 + 2
    np.testing.assert_allclose(result.final_residual, (0.5 * c2) ** 5 * result.initial_residual, rtol=1e-8)


def test_aidi_diverges_on_expanding_step(rng):
    schedule = schedule_from_values([1.0, 0.25])
    model = LinearModel(3.0 * np.eye(2), None, schedule)
    with pytest.raises(DivergenceError) as err:
        aidi_step(rng.standard_normal(2) + 1.0, 1, model, NULL, schedule, 5)
    assert err.value.step == 1


def test_aidi_rejects_zero_rounds(linear_model, short_schedule):
    with pytest.raises(ConfigError):
        aidi_step(np.zeros(2), 1, linear_model, NULL, short_schedule, 0)


def test_naive_inversion_diagnostics(mixture, schedule, rng):
    trajectory = invert(rng.standard_normal(2), 1, mixture, schedule, SPDInvConfig(method=NAIVE))
    np.testing.assert_array_equal(trajectory.rounds, np.zeros(50))
    np.testing.assert_array_equal(trajectory.predictor_calls, np.full(50, 2))
    np.testing.assert_array_equal(trajectory.initial_residuals, trajectory.final_residuals)
    assert np.all(trajectory.initial_residuals > 0)


def test_aidi_per_step_rounds_override(mixture, schedule, rng):
    rounds = [1 + (t % 3) for t in range(50)]
    trajectory = invert(rng.standard_normal(2), 0, mixture, schedule,
                        SPDInvConfig(method=AIDI), aidi_rounds=rounds)
    np.testing.assert_array_equal(trajectory.rounds, rounds)
    np.testing.assert_array_equal(trajectory.predictor_calls, np.array(rounds) + 2)
    with pytest.raises(ConfigError):
        invert(np.zeros(2), 0, mixture, schedule, SPDInvConfig(method=AIDI), aidi_rounds=[3] * 49)


@pytest.mark.parametrize("options", [
    {"method": "newton"},
    {"max_rounds": -1},
    {"max_rounds": 2.5},
    {"threshold": -1.0},
    {"learning_rate": 0.0},
    {"inference_steps": 0},
    {"aidi_rounds": 0},
    {"divergence_factor": 1.0},
    {"divergence_floor": -1.0},
    {"stop_gradient": "false"},
])
def test_config_validation(options):
    with pytest.raises(ConfigError):
        SPDInvConfig(**options)
