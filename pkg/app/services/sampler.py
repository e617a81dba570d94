# app/services/sampler.py
import logging
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from app.services.errors import DimensionError, NonFiniteStateError
from app.services.predictor import Condition, EpsilonPredictor, as_latent, guidance_cost, guided_epsilon
from app.services.schedule import NoiseSchedule, coefficients

logger = logging.getLogger(__name__)

GENERATION = "generation"
INVERSION = "inversion"
DIRECTIONS = (GENERATION, INVERSION)


def _frozen(values: Any, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Latent path with states[t] = z_t for t = 0..T, whatever the direction.

    Step diagnostics are indexed by t - 1 for the step between t - 1 and t.
    `epsilons[t - 1]` is the noise estimate the step used: eps(z_t, t) when
    generating, eps at the returned z_t when inverting.
    """
    states: np.ndarray
    direction: str
    condition: Condition
    schedule_hash: str
    method: str
    guidance: float
    epsilons: np.ndarray
    initial_residuals: np.ndarray
    final_residuals: np.ndarray
    rounds: np.ndarray
    predictor_calls: np.ndarray

    def __post_init__(self):
        states = _frozen(self.states)
        if states.ndim != 2 or states.shape[0] < 2:
            raise DimensionError(f"states must be a (T+1, d) array with T >= 1, got {states.shape}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not np.all(np.isfinite(states)):
            raise NonFiniteStateError("trajectory holds non-finite states")
        steps, dim = states.shape[0] - 1, states.shape[1]

        object.__setattr__(self, "states", states)
        object.__setattr__(self, "epsilons", _frozen(self.epsilons))
        if self.epsilons.shape != (steps, dim):
            raise DimensionError(f"epsilons must have shape {(steps, dim)}, got {self.epsilons.shape}")
        for name, dtype in (("initial_residuals", np.float64), ("final_residuals", np.float64),
                            ("rounds", np.int64), ("predictor_calls", np.int64)):
            values = _frozen(getattr(self, name), dtype)
            if values.shape != (steps,):
                raise DimensionError(f"{name} must have length {steps}, got shape {values.shape}")
            object.__setattr__(self, name, values)
        object.__setattr__(self, "guidance", float(self.guidance))

    @property
    def total_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def z0(self) -> np.ndarray:
        return self.states[0]

    @property
    def zT(self) -> np.ndarray:
        return self.states[-1]

    def ordered_states(self) -> np.ndarray:
        """States in traversal order: z_T..z_0 for generation, z_0..z_T for inversion"""
        return self.states[::-1] if self.direction == GENERATION else self.states

    def summary(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "direction": self.direction,
            "condition": self.condition,
            "total_steps": self.total_steps,
            "dim": self.dim,
            "mean_initial_residual": float(self.initial_residuals.mean()),
            "mean_final_residual": float(self.final_residuals.mean()),
            "mean_rounds": float(self.rounds.mean()),
            "predictor_calls": int(self.predictor_calls.sum()),
        }


def check_finite(z: np.ndarray, t: int, what: str) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NonFiniteStateError(f"{what} produced non-finite values", step=t)
    return z


def _step_with_noise(z_t: np.ndarray, t: int, predictor: EpsilonPredictor, c: Condition,
                     schedule: NoiseSchedule, w: float):
    coef = coefficients(schedule, t)
    eps = guided_epsilon(predictor, z_t, t, c, w)
    z_prev = coef.s1 * z_t + coef.s2 * eps
    return check_finite(z_prev, t, "ddim step"), eps


def ddim_step(z_t: Any, t: int, predictor: EpsilonPredictor, c: Condition,
              schedule: NoiseSchedule, w: float = 1.0) -> np.ndarray:
    """z_{t-1} = s1 * z_t + s2 * eps(z_t, t, c)"""
    z_t = as_latent(z_t, predictor.dim, "z_t")
    return _step_with_noise(z_t, t, predictor, c, schedule, w)[0]


def generate(z_T: Any, c: Condition, predictor: EpsilonPredictor, schedule: NoiseSchedule,
             w: float = 1.0) -> Trajectory:
    """Run the deterministic sampler from z_T down to z_0"""
    z = check_finite(as_latent(z_T, predictor.dim, "z_T").copy(), schedule.total_steps, "initial noise")
    steps = schedule.total_steps
    states = np.empty((steps + 1, predictor.dim))
    epsilons = np.empty((steps, predictor.dim))
    states[steps] = z

    for t in range(steps, 0, -1):
        z, eps = _step_with_noise(z, t, predictor, c, schedule, w)
        states[t - 1] = z
        epsilons[t - 1] = eps

    return Trajectory(
        states=states,
        direction=GENERATION,
        condition=c,
        schedule_hash=schedule.hash,
        method="ddim",
        guidance=w,
        epsilons=epsilons,
        initial_residuals=np.zeros(steps),
        final_residuals=np.zeros(steps),
        rounds=np.zeros(steps, dtype=np.int64),
        predictor_calls=np.full(steps, guidance_cost(c, w), dtype=np.int64),
    )
