# app/services/schedule.py
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from app.services.errors import ScheduleError


@dataclass(frozen=True)
class StepCoefficients:
    """Affine coefficients of one DDIM step between t-1 and t.

    Inversion direction:  z_t     = c1 * z_{t-1} + c2 * eps
    Sampling direction:   z_{t-1} = s1 * z_t     + s2 * eps
    """
    c1: float
    c2: float
    s1: float
    s2: float


def step_coefficients(alpha_bar_t: float, alpha_bar_prev: float) -> StepCoefficients:
    """Closed-form coefficients from the cumulative products at t and t-1"""
    sqrt_t = math.sqrt(alpha_bar_t)
    sqrt_prev = math.sqrt(alpha_bar_prev)
    # sqrt(1/a - 1) for each end of the step
    sigma_t = math.sqrt(1.0 / alpha_bar_t - 1.0)
    sigma_prev = math.sqrt(1.0 / alpha_bar_prev - 1.0)

    return StepCoefficients(
        c1=sqrt_t / sqrt_prev,
        c2=sqrt_t * (sigma_t - sigma_prev),
        s1=sqrt_prev / sqrt_t,
        s2=sqrt_prev * (sigma_prev - sigma_t),
    )


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention alpha_bar[t] for t = 0..T (t = 0 is clean data)"""
    alpha_bar: np.ndarray
    strict: bool = True
    _hash: str = field(init=False, repr=False, compare=False, default="")

    def __post_init__(self):
        values = np.array(self.alpha_bar, dtype=np.float64).reshape(-1)
        if values.size < 2:
            raise ScheduleError("alpha_bar needs at least two entries (T >= 1)")
        if not np.all(np.isfinite(values)):
            raise ScheduleError("alpha_bar must be finite")
        if np.any(values <= 0.0) or np.any(values > 1.0):
            raise ScheduleError("alpha_bar entries must lie in (0, 1]")

        steps = np.diff(values)
        if self.strict and np.any(steps >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing in t")
        if np.any(steps > 0.0):
            raise ScheduleError("alpha_bar must be non-increasing in t")

        values.setflags(write=False)
        object.__setattr__(self, "alpha_bar", values)
        digest = hashlib.sha256(values.astype("<f8").tobytes()).hexdigest()[:16]
        object.__setattr__(self, "_hash", digest)

    @property
    def total_steps(self) -> int:
        return int(self.alpha_bar.size - 1)

    @property
    def hash(self) -> str:
        """Short digest of alpha_bar, used to refuse pairing artifacts across schedules"""
        return self._hash

    def coefficients(self, t: int) -> StepCoefficients:
        return coefficients(self, t)

    def to_dict(self) -> dict:
        return {
            "alpha_bar": [float(a) for a in self.alpha_bar],
            "strict": self.strict,
            "hash": self.hash,
        }


def build_linear_schedule(num_train_steps: int = 1000,
                          beta_start: float = 1e-4,
                          beta_end: float = 2e-2,
                          inference_steps: int = 50) -> NoiseSchedule:
    """Linear-beta training schedule subsampled to T inference steps.

    alpha_bar[t] is the running product of (1 - beta) through training index floor(t*N/T) - 1,
    so alpha_bar[T] is the last training product. The clean index carries the first product
    (1 - beta_start) rather than 1; when T == N that product is already alpha_bar[1] and
    alpha_bar[0] falls back to 1.0 to keep the schedule strictly decreasing.
    """
    if int(num_train_steps) != num_train_steps or num_train_steps < 1:
        raise ScheduleError(f"num_train_steps must be a positive integer, got {num_train_steps}")
    if int(inference_steps) != inference_steps or inference_steps < 1:
        raise ScheduleError(f"inference_steps must be a positive integer, got {inference_steps}")
    if inference_steps > num_train_steps:
        raise ScheduleError(
            f"inference_steps ({inference_steps}) exceeds num_train_steps ({num_train_steps})"
        )
    for name, beta in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not 0.0 < beta < 1.0:
            raise ScheduleError(f"{name} must lie in (0, 1), got {beta}")
    if not beta_start < beta_end:
        raise ScheduleError(f"beta_start ({beta_start}) must be below beta_end ({beta_end})")

    num_train_steps = int(num_train_steps)
    inference_steps = int(inference_steps)

    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    products = np.cumprod(1.0 - betas)

    t = np.arange(1, inference_steps + 1)
    train_index = (t * num_train_steps) // inference_steps - 1

    clean = products[0] if train_index[0] > 0 else 1.0
    alpha_bar = np.concatenate(([clean], products[train_index]))
    return NoiseSchedule(alpha_bar)


def schedule_from_values(alpha_bar: Sequence[float], strict: bool = True) -> NoiseSchedule:
    """Build a schedule from explicit values (tests and persisted configs)"""
    return NoiseSchedule(np.asarray(alpha_bar, dtype=np.float64), strict=strict)


def coefficients(schedule: NoiseSchedule, t: int) -> StepCoefficients:
    """Coefficients of the step between t-1 and t, for 1 <= t <= T"""
    if int(t) != t or not 1 <= t <= schedule.total_steps:
        raise ScheduleError(f"step index {t} outside 1..{schedule.total_steps}")
    t = int(t)
    return step_coefficients(float(schedule.alpha_bar[t]), float(schedule.alpha_bar[t - 1]))
