# app/services/gaussian_mixture.py
import math
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from app.services.errors import ConfigError, DimensionError
from app.services.predictor import NULL, Condition, EpsilonPredictor, as_latent
from app.services.schedule import NoiseSchedule, schedule_from_values


class GaussianMixtureModel(EpsilonPredictor):
    """Isotropic Gaussian mixture with an exact noise predictor.

    Under the schedule every component k diffuses to N(sqrt(a_t) mu_k, v_t I) with
    v_t = a_t * sigma0_sq + 1 - a_t, so the posterior-optimal noise estimate is
    eps = sqrt(1 - a_t) (z - m_bar) / v_t where m_bar is the responsibility-weighted
    diffused mean. A condition restricts the mixture to a labeled subset of components.
    """

    kind = "gaussian_mixture"

    def __init__(self, means: Any, weights: Optional[Sequence[float]], sigma0_sq: float,
                 schedule: NoiseSchedule, conditions: Optional[Mapping[int, Sequence[int]]] = None):
        means = np.array(means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1:
            raise DimensionError(f"means must be a (components, dim) array, got shape {means.shape}")
        super().__init__(means.shape[1], labels=(conditions or {}).keys())

        if not np.all(np.isfinite(means)):
            raise ConfigError("means", "entries must be finite")
        if not math.isfinite(sigma0_sq) or sigma0_sq < 0.0:
            raise ConfigError("sigma0_sq", f"must be >= 0, got {sigma0_sq}")
        if sigma0_sq == 0.0 and schedule.alpha_bar[0] >= 1.0:
            # point masses at a clean index with alpha_bar = 1 have no t = 0 score
            raise ConfigError("sigma0_sq", "must be positive when alpha_bar[0] == 1")

        n_components = means.shape[0]
        if weights is None:
            weights = np.full(n_components, 1.0 / n_components)
        weights = np.array(weights, dtype=np.float64).reshape(-1)
        if weights.size != n_components:
            raise ConfigError("weights", f"expected {n_components} weights, got {weights.size}")
        if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
            raise ConfigError("weights", "weights must be positive and finite")

        subsets: Dict[int, np.ndarray] = {}
        for label, members in (conditions or {}).items():
            members = np.array(sorted(set(int(m) for m in members)), dtype=np.int64)
            if members.size == 0:
                raise ConfigError("conditions", f"condition {label} has no components")
            if members.min() < 0 or members.max() >= n_components:
                raise ConfigError("conditions", f"condition {label} names an unknown component")
            subsets[int(label)] = members

        means.setflags(write=False)
        self.means = means
        self.weights = weights / weights.sum()
        self.weights.setflags(write=False)
        self.sigma0_sq = float(sigma0_sq)
        self.schedule = schedule
        self.conditions = subsets
        self._all = np.arange(n_components)

    # -- model structure -------------------------------------------------

    def _components(self, c: Condition) -> Tuple[np.ndarray, np.ndarray]:
        c = self.check_condition(c)
        members = self._all if c is None else self.conditions[c]
        weights = self.weights[members]
        return self.means[members], weights / weights.sum()

    def _alpha_bar(self, t: int) -> float:
        if int(t) != t or not 0 <= t <= self.schedule.total_steps:
            raise ConfigError("t", f"step index {t} outside 0..{self.schedule.total_steps}")
        return float(self.schedule.alpha_bar[int(t)])

    def marginal_variance(self, t: int) -> float:
        a = self._alpha_bar(t)
        return a * self.sigma0_sq + 1.0 - a

    def _posterior(self, z: np.ndarray, t: int, c: Condition):
        """Diffused means, log-weights, responsibilities and the shared variance"""
        a = self._alpha_bar(t)
        variance = a * self.sigma0_sq + 1.0 - a
        means, weights = self._components(c)
        shifted = math.sqrt(a) * means
        sq_dist = np.sum((z[None, :] - shifted) ** 2, axis=1)
        log_terms = np.log(weights) - sq_dist / (2.0 * variance)
        return shifted, log_terms, softmax(log_terms), variance, a

    # -- predictor contract ----------------------------------------------

    def predict(self, z, t, c=NULL):
        z = as_latent(z, self.dim)
        shifted, _, resp, variance, a = self._posterior(z, t, c)
        mean = resp @ shifted
        return math.sqrt(1.0 - a) * (z - mean) / variance

    def vjp(self, z, t, c, v):
        z = as_latent(z, self.dim)
        v = as_latent(v, self.dim, "v")
        shifted, _, resp, variance, a = self._posterior(z, t, c)
        deviations = shifted - resp @ shifted
        # C v with C = sum_k r_k d_k d_k^T; the Jacobian is symmetric
        cov_v = deviations.T @ (resp * (deviations @ v))
        return math.sqrt(1.0 - a) / variance * (v - cov_v / variance)

    def log_marginal(self, z: np.ndarray, t: int, c: Condition = NULL) -> float:
        """log p_t(z | c) of the diffused mixture"""
        z = as_latent(z, self.dim)
        _, log_terms, _, variance, _ = self._posterior(z, t, c)
        norm = -0.5 * self.dim * math.log(2.0 * math.pi * variance)
        return float(logsumexp(log_terms) + norm)

    def sample(self, n: int, rng: np.random.Generator, c: Condition = NULL) -> np.ndarray:
        """Draw n clean points (t = 0 data law) under condition c"""
        means, weights = self._components(c)
        picks = rng.choice(means.shape[0], size=n, p=weights)
        noise = rng.standard_normal((n, self.dim))
        return means[picks] + math.sqrt(self.sigma0_sq) * noise

    def sample_labeled(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, list]:
        """Clean points with the label of a condition containing their component"""
        picks = rng.choice(self.means.shape[0], size=n, p=self.weights)
        points = self.means[picks] + math.sqrt(self.sigma0_sq) * rng.standard_normal((n, self.dim))
        owner: Dict[int, Condition] = {}
        for label in self.labels:
            for k in self.conditions[label]:
                owner.setdefault(int(k), label)
        return points, [owner.get(int(k), NULL) for k in picks]

    # -- binding and persistence -----------------------------------------

    def with_schedule(self, schedule):
        return GaussianMixtureModel(self.means, self.weights, self.sigma0_sq, schedule,
                                    {label: members.tolist() for label, members in self.conditions.items()})

    @property
    def schedule_hash(self):
        return self.schedule.hash

    def state(self):
        meta = {
            "dim": self.dim,
            "labels": list(self.labels),
            "sigma0_sq": self.sigma0_sq,
            "conditions": {str(label): members.tolist() for label, members in self.conditions.items()},
        }
        arrays = {
            "means": np.ascontiguousarray(self.means),
            "weights": np.ascontiguousarray(self.weights),
            "alpha_bar": np.ascontiguousarray(self.schedule.alpha_bar),
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays, schedule=None):
        if schedule is None:
            schedule = schedule_from_values(arrays["alpha_bar"])
        conditions = {int(label): members for label, members in meta.get("conditions", {}).items()}
        return cls(arrays["means"], arrays["weights"], meta["sigma0_sq"], schedule, conditions)

    def describe(self):
        info = super().describe()
        info.update({
            "components": int(self.means.shape[0]),
            "sigma0_sq": self.sigma0_sq,
            "conditions": {str(label): members.tolist() for label, members in self.conditions.items()},
        })
        return info


def default_mixture(schedule: NoiseSchedule, scale: float = 2.0,
                    sigma0_sq: float = 0.1) -> GaussianMixtureModel:
    """Four corners (+-scale, +-scale); condition 0 is the diagonal pair, condition 1 the anti-diagonal"""
    means = [[scale, scale], [-scale, -scale], [-scale, scale], [scale, -scale]]
    return GaussianMixtureModel(means, None, sigma0_sq, schedule, {0: [0, 1], 1: [2, 3]})
