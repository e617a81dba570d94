# app/services/inversion.py
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np

from app.services.errors import ConfigError, DivergenceError
from app.services.predictor import (
    Condition,
    EpsilonPredictor,
    as_latent,
    guidance_cost,
    guided_epsilon,
    guided_vjp,
)
from app.services.sampler import INVERSION, Trajectory, check_finite
from app.services.schedule import NoiseSchedule, coefficients

logger = logging.getLogger(__name__)

NAIVE = "naive"
AIDI = "aidi"
SPDINV = "spdinv"
METHODS = (NAIVE, SPDINV, AIDI)


@dataclass(frozen=True)
class SPDInvConfig:
    """Inversion hyper-parameters.

    max_rounds (K), threshold (delta) and learning_rate (eta) drive the gradient
    search; aidi_rounds is the fixed iteration count of the baseline; guidance is
    the CFG weight applied to every noise estimate made while inverting.
    A step aborts once its residual exceeds
    divergence_factor * max(L0, threshold, divergence_floor); the floor is an
    absolute residual scale and does not move with the learning rate.
    """
    method: str = SPDINV
    max_rounds: int = 25
    threshold: float = 5e-6
    learning_rate: float = 0.001
    inference_steps: int = 50
    guidance: float = 1.0
    aidi_rounds: int = 5
    stop_gradient: bool = False
    divergence_factor: float = 10.0
    divergence_floor: float = 2e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}, expected one of {list(METHODS)}")
        if int(self.max_rounds) != self.max_rounds or self.max_rounds < 0:
            raise ConfigError("max_rounds", f"must be an integer >= 0, got {self.max_rounds}")
        if not self.threshold >= 0.0:
            raise ConfigError("threshold", f"must be >= 0, got {self.threshold}")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if int(self.inference_steps) != self.inference_steps or self.inference_steps < 1:
            raise ConfigError("inference_steps", f"must be a positive integer, got {self.inference_steps}")
        if int(self.aidi_rounds) != self.aidi_rounds or self.aidi_rounds < 1:
            raise ConfigError("aidi_rounds", f"must be an integer >= 1, got {self.aidi_rounds}")
        if not self.divergence_factor > 1.0:
            raise ConfigError("divergence_factor", f"must be > 1, got {self.divergence_factor}")
        if not self.divergence_floor >= 0.0:
            raise ConfigError("divergence_floor", f"must be >= 0, got {self.divergence_floor}")
        if not isinstance(self.stop_gradient, bool):
            raise ConfigError("stop_gradient", f"expected true or false, got {self.stop_gradient!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class StepResult:
    z: np.ndarray
    initial_residual: float
    final_residual: float
    rounds: int
    predictor_calls: int
    epsilon: np.ndarray


def naive_invert_step(z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
                      schedule: NoiseSchedule, w: float = 1.0) -> np.ndarray:
    """z_t = c1 * z_{t-1} + c2 * eps(z_{t-1}, t-1, c)"""
    z_prev = as_latent(z_prev, predictor.dim, "z_prev")
    coef = coefficients(schedule, t)
    eps = guided_epsilon(predictor, z_prev, t - 1, c, w)
    return check_finite(coef.c1 * z_prev + coef.c2 * eps, t, "naive inversion")


def _map_with_noise(z, z_prev, t, predictor, c, schedule, w):
    coef = coefficients(schedule, t)
    eps = guided_epsilon(predictor, z, t, c, w)
    return coef.c2 * eps + coef.c1 * z_prev, eps


def fixed_point_map(z: Any, z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
                    schedule: NoiseSchedule, w: float = 1.0) -> np.ndarray:
    """f(z) = c2 * eps(z, t, c) + c1 * z_{t-1}; the exact inversion step is its fixed point"""
    z = as_latent(z, predictor.dim)
    z_prev = as_latent(z_prev, predictor.dim, "z_prev")
    return _map_with_noise(z, z_prev, t, predictor, c, schedule, w)[0]


def residual_loss(z: Any, z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
                  schedule: NoiseSchedule, w: float = 1.0) -> float:
    """L = ||f(z) - z||_2 over the flattened latent"""
    z = as_latent(z, predictor.dim)
    return float(np.linalg.norm(fixed_point_map(z, z_prev, t, predictor, c, schedule, w) - z))


def _descent_direction(z, residual, loss, t, predictor, c, w, c2, stop_gradient):
    unit = residual / loss
    if stop_gradient:
        return -unit
    return c2 * guided_vjp(predictor, z, t, c, unit, w) - unit


def residual_grad(z: Any, z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
                  schedule: NoiseSchedule, w: float = 1.0, stop_gradient: bool = False) -> np.ndarray:
    """grad L = (J_f - I)^T r / ||r|| with J_f = c2 * d eps / d z; zero at a fixed point"""
    z = as_latent(z, predictor.dim)
    residual = fixed_point_map(z, z_prev, t, predictor, c, schedule, w) - z
    loss = float(np.linalg.norm(residual))
    if loss == 0.0:
        return np.zeros(predictor.dim)
    c2 = coefficients(schedule, t).c2
    return _descent_direction(z, residual, loss, t, predictor, c, w, c2, stop_gradient)


def _guard(loss: float, limit: float, t: int, what: str):
    if not np.isfinite(loss):
        raise DivergenceError(f"{what} residual became non-finite", step=t)
    if loss > limit:
        raise DivergenceError(f"{what} residual {loss:.6g} exceeded guard {limit:.6g}", step=t)


def spdinv_step(z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
                schedule: NoiseSchedule, config: SPDInvConfig) -> StepResult:
    """Gradient descent on the fixed-point residual, started from the naive step.

    Stops once L < threshold or after max_rounds updates, and returns the
    lowest-residual iterate seen.
    """
    z_prev = as_latent(z_prev, predictor.dim, "z_prev")
    w = config.guidance
    c2 = coefficients(schedule, t).c2

    cost = guidance_cost(c, w)

    z = naive_invert_step(z_prev, t, predictor, c, schedule, w)
    calls = cost
    rounds = 0
    initial = None
    best_z, best_loss, best_eps = z, np.inf, None

    while True:
        image, eps = _map_with_noise(z, z_prev, t, predictor, c, schedule, w)
        calls += cost
        residual = image - z
        loss = float(np.linalg.norm(residual))
        if initial is None:
            initial = loss
            limit = config.divergence_factor * max(initial, config.threshold, config.divergence_floor)
        _guard(loss, limit, t, "spdinv")

        if loss < best_loss:
            best_z, best_loss, best_eps = z, loss, eps
        if loss < config.threshold or loss == 0.0 or rounds >= config.max_rounds:
            break

        direction = _descent_direction(z, residual, loss, t, predictor, c, w, c2, config.stop_gradient)
        if not config.stop_gradient:
            calls += cost
        z = check_finite(z - config.learning_rate * direction, t, "spdinv update")
        rounds += 1

    logger.debug("spdinv t=%d L0=%.3e Lf=%.3e rounds=%d", t, initial, best_loss, rounds)
    return StepResult(best_z, initial, best_loss, rounds, calls, best_eps)


def aidi_step(z_prev: Any, t: int, predictor: EpsilonPredictor, c: Condition,
              schedule: NoiseSchedule, rounds: int, *, w: float = 1.0,
              divergence_factor: float = 10.0, floor: float = 5e-6) -> StepResult:
    """Fixed-round iteration z <- f(z) from the naive step.

    Each round's map evaluation also yields the residual of the iterate it was
    applied to; one extra evaluation measures the residual of the final iterate.
    """
    if int(rounds) != rounds or rounds < 1:
        raise ConfigError("aidi_rounds", f"must be an integer >= 1, got {rounds}")
    z_prev = as_latent(z_prev, predictor.dim, "z_prev")

    cost = guidance_cost(c, w)

    z = naive_invert_step(z_prev, t, predictor, c, schedule, w)
    calls = cost
    initial = None
    limit = np.inf

    for _ in range(int(rounds)):
        image, _ = _map_with_noise(z, z_prev, t, predictor, c, schedule, w)
        calls += cost
        loss = float(np.linalg.norm(image - z))
        if initial is None:
            initial = loss
            limit = divergence_factor * max(initial, floor)
        _guard(loss, limit, t, "aidi")
        z = check_finite(image, t, "aidi iteration")

    image, eps = _map_with_noise(z, z_prev, t, predictor, c, schedule, w)
    calls += cost
    final = float(np.linalg.norm(image - z))
    _guard(final, limit, t, "aidi")

    logger.debug("aidi t=%d L0=%.3e Lf=%.3e rounds=%d", t, initial, final, rounds)
    return StepResult(z, initial, final, int(rounds), calls, eps)


def _naive_result(z_prev, t, predictor, c, schedule, w) -> StepResult:
    z = naive_invert_step(z_prev, t, predictor, c, schedule, w)
    # diagnostic residual, not part of the method itself
    image, eps = _map_with_noise(z, z_prev, t, predictor, c, schedule, w)
    loss = float(np.linalg.norm(image - z))
    return StepResult(z, loss, loss, 0, 2 * guidance_cost(c, w), eps)


def invert(z_0: Any, c: Condition, predictor: EpsilonPredictor, schedule: NoiseSchedule,
           config: SPDInvConfig, aidi_rounds: Optional[Sequence[int]] = None) -> Trajectory:
    """Map a clean latent to a noise code with the method named in config.

    aidi_rounds, when given, overrides the baseline's round count per step
    (entry t - 1 for step t); the harness uses it for budget-matched runs.
    """
    steps = schedule.total_steps
    if aidi_rounds is not None and len(aidi_rounds) != steps:
        raise ConfigError("aidi_rounds", f"expected {steps} per-step entries, got {len(aidi_rounds)}")

    z = check_finite(as_latent(z_0, predictor.dim, "z_0").copy(), 0, "input latent")
    states = np.empty((steps + 1, predictor.dim))
    epsilons = np.empty((steps, predictor.dim))
    initial = np.empty(steps)
    final = np.empty(steps)
    rounds = np.zeros(steps, dtype=np.int64)
    calls = np.zeros(steps, dtype=np.int64)
    states[0] = z

    for t in range(1, steps + 1):
        if config.method == SPDINV:
            result = spdinv_step(z, t, predictor, c, schedule, config)
        elif config.method == AIDI:
            n_rounds = config.aidi_rounds if aidi_rounds is None else int(aidi_rounds[t - 1])
            result = aidi_step(z, t, predictor, c, schedule, n_rounds, w=config.guidance,
                               divergence_factor=config.divergence_factor,
                               floor=max(config.threshold, config.divergence_floor))
        else:
            result = _naive_result(z, t, predictor, c, schedule, config.guidance)

        z = result.z
        states[t] = z
        epsilons[t - 1] = result.epsilon
        initial[t - 1] = result.initial_residual
        final[t - 1] = result.final_residual
        rounds[t - 1] = result.rounds
        calls[t - 1] = result.predictor_calls

    return Trajectory(
        states=states,
        direction=INVERSION,
        condition=c,
        schedule_hash=schedule.hash,
        method=config.method,
        guidance=config.guidance,
        epsilons=epsilons,
        initial_residuals=initial,
        final_residuals=final,
        rounds=rounds,
        predictor_calls=calls,
    )
