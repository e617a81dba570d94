# app/services/linear_model.py
import logging
from typing import Any, Optional

import numpy as np
import scipy.linalg

from app.services.errors import ConfigError, DimensionError, SingularSystemError
from app.services.predictor import NULL, EpsilonPredictor, as_latent
from app.services.schedule import NoiseSchedule, coefficients, schedule_from_values

logger = logging.getLogger(__name__)


class LinearModel(EpsilonPredictor):
    """eps = A z + b, time and condition independent.

    With a schedule attached the per-step contraction margins 1 - ||c2 A||_2 are
    recorded, and solve_fixed_point gives the exact root of the inversion step.
    """

    kind = "linear"

    def __init__(self, matrix: Any, offset: Any = None, schedule: Optional[NoiseSchedule] = None):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f"matrix must be square, got shape {matrix.shape}")
        super().__init__(matrix.shape[0])
        if not np.all(np.isfinite(matrix)):
            raise ConfigError("matrix", "entries must be finite")

        offset = np.zeros(self.dim) if offset is None else as_latent(offset, self.dim, "offset").copy()
        if not np.all(np.isfinite(offset)):
            raise ConfigError("offset", "entries must be finite")

        matrix.setflags(write=False)
        offset.setflags(write=False)
        self.matrix = matrix
        self.offset = offset
        self.schedule = schedule
        self.contraction_margins = self._margins(schedule)

    def _margins(self, schedule: Optional[NoiseSchedule]) -> Optional[np.ndarray]:
        if schedule is None:
            return None
        spectral = np.linalg.norm(self.matrix, ord=2)
        margins = np.array([
            1.0 - abs(coefficients(schedule, t).c2) * spectral
            for t in range(1, schedule.total_steps + 1)
        ])
        margins.setflags(write=False)
        if np.any(margins <= 0.0):
            logger.debug("linear model is not contractive on %d of %d steps",
                         int(np.sum(margins <= 0.0)), margins.size)
        return margins

    def predict(self, z, t, c=NULL):
        z = as_latent(z, self.dim)
        self.check_condition(c)
        return self.matrix @ z + self.offset

    def vjp(self, z, t, c, v):
        as_latent(z, self.dim)
        v = as_latent(v, self.dim, "v")
        return self.matrix.T @ v

    def solve_fixed_point(self, z_prev: Any, t: int,
                          schedule: Optional[NoiseSchedule] = None) -> np.ndarray:
        """Solve (I - c2 A) z = c1 z_prev + c2 b directly"""
        schedule = schedule or self.schedule
        if schedule is None:
            raise ConfigError("schedule", "solve_fixed_point needs a schedule")
        z_prev = as_latent(z_prev, self.dim, "z_prev")
        coef = coefficients(schedule, t)

        system = np.eye(self.dim) - coef.c2 * self.matrix
        rhs = coef.c1 * z_prev + coef.c2 * self.offset
        if np.linalg.cond(system) > 1.0 / np.finfo(np.float64).eps:
            raise SingularSystemError(f"step {t}: I - c2*A is singular (c2={coef.c2:.6g})")
        try:
            return scipy.linalg.solve(system, rhs)
        except scipy.linalg.LinAlgError as exc:
            raise SingularSystemError(f"step {t}: {exc}") from exc

    def with_schedule(self, schedule):
        return LinearModel(self.matrix, self.offset, schedule)

    def state(self):
        meta = {"dim": self.dim, "labels": []}
        arrays = {
            "matrix": np.ascontiguousarray(self.matrix),
            "offset": np.ascontiguousarray(self.offset),
        }
        if self.schedule is not None:
            arrays["alpha_bar"] = np.ascontiguousarray(self.schedule.alpha_bar)
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays, schedule=None):
        if schedule is None and "alpha_bar" in arrays:
            schedule = schedule_from_values(arrays["alpha_bar"])
        return cls(arrays["matrix"], arrays["offset"], schedule)

    def describe(self):
        info = super().describe()
        if self.contraction_margins is not None:
            info["min_contraction_margin"] = float(self.contraction_margins.min())
        return info
