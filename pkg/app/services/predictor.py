# app/services/predictor.py
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from app.services.errors import ConfigError, DimensionError
from app.services.schedule import NoiseSchedule

# A condition is a small integer label; None is the unconditional (NULL) condition
Condition = Optional[int]
NULL: Condition = None


def as_latent(z: Any, dim: int, name: str = "z") -> np.ndarray:
    """Coerce to a flat float64 latent of length dim"""
    values = np.asarray(z, dtype=np.float64).reshape(-1)
    if values.size != dim:
        raise DimensionError(f"{name} has dimension {values.size}, model expects {dim}")
    return values


class EpsilonPredictor(ABC):
    """Noise predictor eps(z, t, c) with a vector-Jacobian product.

    Predictors are frozen once built: predict and vjp never touch parameters,
    so one instance can be shared across worker threads.
    """

    kind: str = "abstract"

    def __init__(self, dim: int, labels: Sequence[int] = ()):
        if int(dim) != dim or dim < 1:
            raise DimensionError(f"latent dimension must be a positive integer, got {dim}")
        self.dim = int(dim)
        self.labels: Tuple[int, ...] = tuple(sorted(int(label) for label in labels))

    def check_condition(self, c: Condition) -> Condition:
        if c is None:
            return NULL
        if int(c) not in self.labels:
            raise ConfigError("condition", f"label {c} not in declared labels {list(self.labels)}")
        return int(c)

    @abstractmethod
    def predict(self, z: np.ndarray, t: int, c: Condition = NULL) -> np.ndarray:
        """Noise estimate at step t"""

    @abstractmethod
    def vjp(self, z: np.ndarray, t: int, c: Condition, v: np.ndarray) -> np.ndarray:
        """(d eps / d z)^T v"""

    def with_schedule(self, schedule: NoiseSchedule) -> "EpsilonPredictor":
        """Predictor bound to another schedule (identity for schedule-free models)"""
        return self

    @property
    def schedule_hash(self) -> Optional[str]:
        return None

    def state(self) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        """(metadata, arrays) used by model persistence"""
        return {"dim": self.dim, "labels": list(self.labels)}, {}

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "labels": list(self.labels)}


class ZeroPredictor(EpsilonPredictor):
    """eps = 0 everywhere; every inversion method is exact under it"""

    kind = "zero"

    def predict(self, z, t, c=NULL):
        as_latent(z, self.dim)
        self.check_condition(c)
        return np.zeros(self.dim)

    def vjp(self, z, t, c, v):
        as_latent(z, self.dim)
        as_latent(v, self.dim, "v")
        return np.zeros(self.dim)

    @classmethod
    def from_state(cls, meta: Dict[str, Any], arrays: Dict[str, np.ndarray],
                   schedule: Optional[NoiseSchedule] = None) -> "ZeroPredictor":
        return cls(meta["dim"], meta.get("labels", ()))


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u)"""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionError(
            f"guidance inputs differ in shape: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    if w == 1.0:
        return eps_cond.copy()
    if w == 0.0:
        return eps_uncond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


def _needs_both(c: Condition, w: float) -> bool:
    return c is not None and w != 1.0


def guidance_cost(c: Condition, w: float = 1.0) -> int:
    """Model invocations behind one guided_epsilon or guided_vjp evaluation"""
    return 2 if _needs_both(c, w) and w != 0.0 else 1


def guided_epsilon(predictor: EpsilonPredictor, z: np.ndarray, t: int,
                   c: Condition, w: float = 1.0) -> np.ndarray:
    """Guided noise estimate; a single model call when w == 1 or c is NULL"""
    if not _needs_both(c, w):
        return predictor.predict(z, t, c)
    if w == 0.0:
        return predictor.predict(z, t, NULL)
    return cfg_combine(predictor.predict(z, t, NULL), predictor.predict(z, t, c), w)


def guided_vjp(predictor: EpsilonPredictor, z: np.ndarray, t: int,
               c: Condition, v: np.ndarray, w: float = 1.0) -> np.ndarray:
    """vjp of the guided estimate: (1 - w) * vjp_uncond + w * vjp_cond"""
    if not _needs_both(c, w):
        return predictor.vjp(z, t, c, v)
    if w == 0.0:
        return predictor.vjp(z, t, NULL, v)
    return (1.0 - w) * predictor.vjp(z, t, NULL, v) + w * predictor.vjp(z, t, c, v)
