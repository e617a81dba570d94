import math

import numpy as np
import pytest

from app.services.errors import ScheduleError
from app.services.schedule import (
    build_linear_schedule,
    coefficients,
    schedule_from_values,
    step_coefficients,
)


def test_default_schedule_shape(schedule):
    assert schedule.total_steps == 50
    assert schedule.alpha_bar.shape == (51,)
    assert schedule.alpha_bar[0] == pytest.approx(1.0 - 1e-4, rel=1e-15)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[-1] > 0


@pytest.mark.parametrize("args", [
    (10, 0.0, 0.0, 10),
    (10, 1e-4, 1.0, 10),
    (10, 0.02, 1e-4, 10),
    (10, 1e-4, 2e-2, 11),
    (10, 1e-4, 2e-2, 0),
])
def test_build_rejects_invalid_parameters(args):
    with pytest.raises(ScheduleError):
        build_linear_schedule(*args)


def test_full_schedule_matches_running_product():
    schedule = build_linear_schedule(1000, 1e-4, 2e-2, 1000)
    betas = np.linspace(1e-4, 2e-2, 1000)
    product = 1.0
    expected = [1.0]
    for beta in betas:
        product *= 1.0 - beta
        expected.append(product)
    np.testing.assert_allclose(schedule.alpha_bar, expected, rtol=1e-12)


def test_clean_index_carries_the_first_product():
    assert build_linear_schedule(1000, 1e-4, 2e-2, 1000).alpha_bar[0] == 1.0
    assert build_linear_schedule(1000, 1e-4, 2e-2, 600).alpha_bar[0] == 1.0
    sub = build_linear_schedule(1000, 1e-4, 2e-2, 10)
    assert sub.alpha_bar[0] == pytest.approx(1.0 - 1e-4, rel=1e-15)
    assert sub.alpha_bar[0] > sub.alpha_bar[1]


def test_subsampling_uses_trailing_indices():
    full = build_linear_schedule(1000, 1e-4, 2e-2, 1000)
    sub = build_linear_schedule(1000, 1e-4, 2e-2, 50)
    np.testing.assert_array_equal(sub.alpha_bar[1:], full.alpha_bar[20::20])


def test_identity_step_for_equal_entries():
    coef = step_coefficients(0.5, 0.5)
    assert coef.c1 == 1.0
    assert coef.c2 == 0.0
    assert coef.s1 == 1.0
    assert coef.s2 == 0.0


def test_equal_entries_need_non_strict_schedule():
    with pytest.raises(ScheduleError):
        schedule_from_values([1.0, 0.5, 0.5])
    relaxed = schedule_from_values([1.0, 0.5, 0.5], strict=False)
    coef = coefficients(relaxed, 2)
    assert (coef.c1, coef.c2) == (1.0, 0.0)


def test_hand_evaluated_coefficients():
    coef = step_coefficients(0.25, 1.0)
    assert coef.c1 == pytest.approx(0.5)
    assert coef.c2 == pytest.approx(math.sqrt(3) / 2)


def test_coefficient_identities_every_step(schedule):
    for t in range(1, schedule.total_steps + 1):
        coef = coefficients(schedule, t)
        assert coef.c1 * coef.s1 == pytest.approx(1.0, abs=1e-15)
        assert abs(coef.s1 * coef.c2 + coef.s2) < 1e-12


def test_inversion_then_sampling_is_identity(schedule, rng):
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, schedule.total_steps + 1))
        z = rng.standard_normal(4)
        eps = rng.standard_normal(4)
        coef = coefficients(schedule, t)
        forward = coef.c1 * z + coef.c2 * eps
        back = coef.s1 * forward + coef.s2 * eps
        worst = max(worst, float(np.max(np.abs(back - z))))
    assert worst <= 1e-10


@pytest.mark.parametrize("t", [0, 51, -1, 2.5])
def test_coefficients_reject_out_of_range(schedule, t):
    with pytest.raises(ScheduleError):
        coefficients(schedule, t)


def test_coefficients_are_pure(schedule):
    assert coefficients(schedule, 17) == coefficients(schedule, 17)


def test_schedule_is_read_only_and_hashed(schedule):
    with pytest.raises(ValueError):
        schedule.alpha_bar[1] = 0.5
    other = build_linear_schedule(1000, 1e-4, 2e-2, 25)
    assert schedule.hash != other.hash
    assert schedule.hash == build_linear_schedule(1000, 1e-4, 2e-2, 50).hash


@pytest.mark.parametrize("values", [[1.0], [1.0, 0.0], [1.0, 1.2], [1.0, float("nan")], [0.5, 0.6]])
def test_schedule_rejects_bad_values(values):
    with pytest.raises(ScheduleError):
        schedule_from_values(values)
