# app/services/metrics.py
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.services.errors import ConfigError, DimensionError, ScheduleMismatchError
from app.services.gaussian_mixture import GaussianMixtureModel
from app.services.predictor import NULL, Condition, EpsilonPredictor, as_latent
from app.services.sampler import Trajectory, generate
from app.services.schedule import NoiseSchedule


def check_pairing(first: Trajectory, second: Trajectory):
    """Refuse to compare trajectories from different schedules or shapes"""
    if first.schedule_hash != second.schedule_hash:
        raise ScheduleMismatchError(
            f"schedule hash {first.schedule_hash} does not match {second.schedule_hash}"
        )
    if first.states.shape != second.states.shape:
        raise DimensionError(f"trajectory shapes differ: {first.states.shape} vs {second.states.shape}")


def noise_gap(truth: Trajectory, inverted: Trajectory) -> np.ndarray:
    """Per-step mean squared difference between z_t of both paths, t = 0..T"""
    check_pairing(truth, inverted)
    return np.mean((truth.states - inverted.states) ** 2, axis=1)


def reconstruction_gap(z0: Any, z0_rec: Any) -> Tuple[float, float]:
    """(MSE, PSNR) with the peak taken as max |z0|; PSNR is inf for an exact match"""
    z0 = np.asarray(z0, dtype=np.float64).reshape(-1)
    z0_rec = as_latent(z0_rec, z0.size, "z0_rec")
    mse = float(np.mean((z0 - z0_rec) ** 2))
    if mse == 0.0:
        return mse, math.inf
    peak = float(np.max(np.abs(z0)))
    if peak == 0.0:
        return mse, -math.inf
    return mse, 10.0 * math.log10(peak ** 2 / mse)


def edit_divergence(z_T_star: Any, z_T_hat: Any, c_target: Condition, predictor: EpsilonPredictor,
                    schedule: NoiseSchedule, w: float = 1.0,
                    reference: Optional[np.ndarray] = None) -> float:
    """||generate(z_hat).z0 - generate(z_star).z0||^2 / d under the target condition.

    `reference` is the ideal edit endpoint when the caller already has it.
    """
    z_T_star = as_latent(z_T_star, predictor.dim, "z_T_star")
    z_T_hat = as_latent(z_T_hat, predictor.dim, "z_T_hat")
    if reference is None:
        reference = generate(z_T_star, c_target, predictor, schedule, w).z0
    edited = generate(z_T_hat, c_target, predictor, schedule, w).z0
    return float(np.sum((edited - reference) ** 2) / predictor.dim)


def coupling_score(z_T: Any, c: Condition, model: EpsilonPredictor,
                   schedule: Optional[NoiseSchedule] = None) -> float:
    """log p_T(z | c) - log p_T(z | NULL) under the diffused mixture (signed)"""
    if not isinstance(model, GaussianMixtureModel):
        raise ConfigError("predictor", f"coupling needs a gaussian_mixture model, got {model.kind}")
    if schedule is not None and schedule.hash != model.schedule.hash:
        model = model.with_schedule(schedule)
    if c is NULL:
        return 0.0
    steps = model.schedule.total_steps
    return model.log_marginal(z_T, steps, c) - model.log_marginal(z_T, steps, NULL)


@dataclass
class GapReport:
    """Aggregated outcome of one inversion method over a batch of trials"""
    method: str
    config: Dict[str, Any]
    predictor: Dict[str, Any]
    successful_trials: int = 0
    failed_trials: int = 0
    per_step_gap: List[float] = field(default_factory=list)
    final_gap: Optional[float] = None
    reconstruction_mse: Optional[float] = None
    reconstruction_psnr: Optional[float] = None
    mean_initial_residual: Optional[float] = None
    mean_final_residual: Optional[float] = None
    mean_rounds: Optional[float] = None
    mean_predictor_calls: Optional[float] = None
    residual_profile: Dict[str, List[float]] = field(default_factory=dict)
    edit_divergence: List[Optional[float]] = field(default_factory=list)
    mean_edit_divergence: Optional[float] = None
    coupling_mean: Optional[float] = None
    coupling_abs_mean: Optional[float] = None
    coupling_excess_abs_mean: Optional[float] = None
    trials: List[Dict[str, Any]] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "config": self.config,
            "predictor": self.predictor,
            "successful_trials": self.successful_trials,
            "failed_trials": self.failed_trials,
            "per_step_gap": self.per_step_gap,
            "final_gap": self.final_gap,
            "reconstruction_mse": self.reconstruction_mse,
            "reconstruction_psnr": self.reconstruction_psnr,
            "mean_initial_residual": self.mean_initial_residual,
            "mean_final_residual": self.mean_final_residual,
            "mean_rounds": self.mean_rounds,
            "mean_predictor_calls": self.mean_predictor_calls,
            "residual_profile": self.residual_profile,
            "edit_divergence": self.edit_divergence,
            "mean_edit_divergence": self.mean_edit_divergence,
            "coupling_mean": self.coupling_mean,
            "coupling_abs_mean": self.coupling_abs_mean,
            "coupling_excess_abs_mean": self.coupling_excess_abs_mean,
            "trials": self.trials,
            "failures": self.failures,
        }
