# app/services/errors.py
from typing import Optional


class LabError(Exception):
    """Base class for every error raised by the inversion lab"""


class ConfigError(LabError, ValueError):
    """Invalid experiment or hyper-parameter configuration"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ScheduleError(LabError, ValueError):
    """Invalid noise schedule parameters or step index"""


class DimensionError(LabError, ValueError):
    """Latent dimension does not match the model"""


class InversionError(LabError):
    """A sampler or inversion step could not produce a usable latent"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        prefix = f"step {step}: " if step is not None else ""
        super().__init__(prefix + message)


class NonFiniteStateError(InversionError):
    """A step produced NaN or Inf entries"""


class DivergenceError(InversionError):
    """The residual grew past the divergence guard"""


class SingularSystemError(LabError):
    """(I - c2*A) is singular, so the linear oracle has no unique fixed point"""


class FormatError(LabError):
    """A persisted file does not match the expected layout"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ScheduleMismatchError(LabError):
    """Two artifacts were produced under different schedules"""


class ExperimentFailedError(LabError):
    """Every trial of at least one method failed"""
