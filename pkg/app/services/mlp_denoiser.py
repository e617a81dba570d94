# app/services/mlp_denoiser.py
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.services.errors import ConfigError, DimensionError
from app.services.predictor import NULL, Condition, EpsilonPredictor, as_latent
from app.services.schedule import NoiseSchedule, schedule_from_values

logger = logging.getLogger(__name__)

PARAMETER_NAMES = ("cond_embedding", "w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class TrainingConfig:
    epochs: int = 40
    learning_rate: float = 0.05
    batch_size: int = 128
    momentum: float = 0.9
    hidden: int = 64
    embedding_dim: int = 4
    frequencies: int = 4
    cond_dropout: float = 0.1
    holdout_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate}")
        for name in ("batch_size", "hidden", "embedding_dim", "frequencies", "holdout_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout", f"must lie in [0, 1), got {self.cond_dropout}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum}")


def time_embedding(fraction: np.ndarray, frequencies: int) -> np.ndarray:
    """Sinusoidal features of t / T, shape (n, 2 * frequencies)"""
    fraction = np.asarray(fraction, dtype=np.float64).reshape(-1, 1)
    scales = math.pi * 2.0 ** np.arange(frequencies)
    angles = fraction * scales[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class MlpDenoiser(EpsilonPredictor):
    """Two tanh hidden layers over [z, time features, condition embedding].

    The condition embedding table has one row per label plus a final NULL row.
    Reverse-mode rules for the fixed architecture are written out by hand.
    """

    kind = "mlp"

    def __init__(self, params: Dict[str, np.ndarray], dim: int, labels: Sequence[int],
                 schedule: NoiseSchedule, frequencies: int = 4,
                 training: Optional[Dict[str, Any]] = None,
                 history: Optional[Dict[str, Any]] = None):
        super().__init__(dim, labels)
        missing = [name for name in PARAMETER_NAMES if name not in params]
        if missing:
            raise ConfigError("params", f"missing parameters {missing}")

        self.params = {name: np.array(params[name], dtype=np.float64) for name in PARAMETER_NAMES}
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise ConfigError(name, "parameters must be finite")
            value.setflags(write=False)

        self.frequencies = int(frequencies)
        self.schedule = schedule
        self.training = dict(training or {})
        self.history = dict(history or {})

        expected_in = self.dim + 2 * self.frequencies + self.params["cond_embedding"].shape[1]
        if self.params["w1"].shape[0] != expected_in:
            raise DimensionError(
                f"w1 expects {self.params['w1'].shape[0]} inputs, architecture gives {expected_in}"
            )
        if self.params["cond_embedding"].shape[0] != len(self.labels) + 1:
            raise DimensionError("cond_embedding needs one row per label plus a NULL row")
        if self.params["w3"].shape[1] != self.dim:
            raise DimensionError(f"output layer has width {self.params['w3'].shape[1]}, expected {self.dim}")

    @classmethod
    def initialize(cls, dim: int, labels: Sequence[int], schedule: NoiseSchedule,
                   rng: np.random.Generator, hidden: int = 64, embedding_dim: int = 4,
                   frequencies: int = 4) -> "MlpDenoiser":
        """Random init with fan-in scaled normal weights and zero biases"""
        n_in = dim + 2 * frequencies + embedding_dim
        params = {
            "cond_embedding": rng.normal(0.0, 1.0, (len(labels) + 1, embedding_dim)),
            "w1": rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden)),
            "b2": np.zeros(hidden),
            "w3": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, dim)),
            "b3": np.zeros(dim),
        }
        return cls(params, dim, labels, schedule, frequencies)

    # -- forward / backward ----------------------------------------------

    def _row(self, c: Condition) -> int:
        c = self.check_condition(c)
        return len(self.labels) if c is None else self.labels.index(c)

    def _inputs(self, z: np.ndarray, fraction: np.ndarray, rows: np.ndarray,
                params: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [z, time_embedding(fraction, self.frequencies), params["cond_embedding"][rows]], axis=1
        )

    @staticmethod
    def _forward(x: np.ndarray, params: Dict[str, np.ndarray]):
        h1 = np.tanh(x @ params["w1"] + params["b1"])
        h2 = np.tanh(h1 @ params["w2"] + params["b2"])
        out = h2 @ params["w3"] + params["b3"]
        return h1, h2, out

    def _fraction(self, t: int) -> float:
        if int(t) != t or not 0 <= t <= self.schedule.total_steps:
            raise ConfigError("t", f"step index {t} outside 0..{self.schedule.total_steps}")
        return t / self.schedule.total_steps

    def predict(self, z, t, c=NULL):
        z = as_latent(z, self.dim)
        x = self._inputs(z[None, :], np.array([self._fraction(t)]), np.array([self._row(c)]), self.params)
        return self._forward(x, self.params)[2][0]

    def vjp(self, z, t, c, v):
        z = as_latent(z, self.dim)
        v = as_latent(v, self.dim, "v")
        x = self._inputs(z[None, :], np.array([self._fraction(t)]), np.array([self._row(c)]), self.params)
        h1, h2, _ = self._forward(x, self.params)

        grad_h2 = (v @ self.params["w3"].T) * (1.0 - h2[0] ** 2)
        grad_h1 = (grad_h2 @ self.params["w2"].T) * (1.0 - h1[0] ** 2)
        grad_x = grad_h1 @ self.params["w1"].T
        return grad_x[: self.dim]

    def with_schedule(self, schedule):
        return MlpDenoiser(self.params, self.dim, self.labels, schedule, self.frequencies,
                           self.training, self.history)

    @property
    def schedule_hash(self):
        return self.schedule.hash

    def state(self):
        meta = {
            "dim": self.dim,
            "labels": list(self.labels),
            "frequencies": self.frequencies,
            "training": self.training,
            "history": self.history,
        }
        arrays = {name: np.ascontiguousarray(self.params[name]) for name in PARAMETER_NAMES}
        arrays["alpha_bar"] = np.ascontiguousarray(self.schedule.alpha_bar)
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays, schedule=None):
        if schedule is None:
            schedule = schedule_from_values(arrays["alpha_bar"])
        params = {name: arrays[name] for name in PARAMETER_NAMES}
        return cls(params, meta["dim"], meta.get("labels", ()), schedule,
                   meta.get("frequencies", 4), meta.get("training"), meta.get("history"))

    def describe(self):
        info = super().describe()
        info.update({
            "hidden": int(self.params["w1"].shape[1]),
            "training": self.training,
            "final_loss": self.history.get("final_loss"),
        })
        return info


def _loss_and_grads(model: MlpDenoiser, params: Dict[str, np.ndarray], x_inputs: Tuple,
                    target: np.ndarray, with_grads: bool = True):
    """Mean squared error of the noise estimate plus parameter gradients"""
    z, fraction, rows = x_inputs
    x = model._inputs(z, fraction, rows, params)
    h1, h2, out = model._forward(x, params)
    diff = out - target
    loss = float(np.mean(diff ** 2))
    if not with_grads:
        return loss, None

    grad_out = 2.0 * diff / diff.size
    grads = {"w3": h2.T @ grad_out, "b3": grad_out.sum(axis=0)}
    grad_a2 = (grad_out @ params["w3"].T) * (1.0 - h2 ** 2)
    grads["w2"] = h1.T @ grad_a2
    grads["b2"] = grad_a2.sum(axis=0)
    grad_a1 = (grad_a2 @ params["w2"].T) * (1.0 - h1 ** 2)
    grads["w1"] = x.T @ grad_a1
    grads["b1"] = grad_a1.sum(axis=0)

    grad_x = grad_a1 @ params["w1"].T
    grad_embedding = np.zeros_like(params["cond_embedding"])
    np.add.at(grad_embedding, rows, grad_x[:, model.dim + 2 * model.frequencies:])
    grads["cond_embedding"] = grad_embedding
    return loss, grads


def _noisy_batch(points: np.ndarray, rows: np.ndarray, schedule: NoiseSchedule,
                 rng: np.random.Generator):
    t = rng.integers(1, schedule.total_steps + 1, size=points.shape[0])
    alpha = schedule.alpha_bar[t][:, None]
    noise = rng.standard_normal(points.shape)
    noisy = np.sqrt(alpha) * points + np.sqrt(1.0 - alpha) * noise
    return (noisy, t / schedule.total_steps, rows), noise


def train_mlp(dataset: Sequence[Tuple[Any, Condition]], schedule: NoiseSchedule,
              epochs: int = 40, lr: float = 0.05, seed: int = 0,
              labels: Optional[Sequence[int]] = None, show_progress: bool = False,
              **options) -> MlpDenoiser:
    """Fit the denoiser to predict injected noise at a uniformly drawn step.

    All randomness (initialization, held-out batch, shuffling, steps, noise and
    condition dropout) comes from one generator seeded with `seed`.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset", "training dataset is empty")
    config = TrainingConfig(epochs=epochs, learning_rate=lr, seed=seed, **options)

    points = np.stack([np.asarray(z, dtype=np.float64).reshape(-1) for z, _ in dataset])
    conditions = [c for _, c in dataset]
    if labels is None:
        labels = sorted({int(c) for c in conditions if c is not None})
    labels = tuple(sorted(int(label) for label in labels))
    dim = points.shape[1]

    rng = np.random.default_rng(seed)
    model = MlpDenoiser.initialize(dim, labels, schedule, rng, hidden=config.hidden,
                                   embedding_dim=config.embedding_dim, frequencies=config.frequencies)
    null_row = len(labels)
    rows = np.array([null_row if c is None else model._row(c) for c in conditions], dtype=np.int64)

    holdout_index = rng.integers(0, points.shape[0], size=config.holdout_size)
    holdout_inputs, holdout_target = _noisy_batch(points[holdout_index], rows[holdout_index], schedule, rng)

    params = {name: value.copy() for name, value in model.params.items()}
    initial_loss, _ = _loss_and_grads(model, params, holdout_inputs, holdout_target, with_grads=False)
    losses: List[float] = []
    velocity = {name: np.zeros_like(value) for name, value in params.items()}

    logger.info("training mlp denoiser: %d points, dim=%d, labels=%s, epochs=%d",
                points.shape[0], dim, list(labels), config.epochs)

    for epoch in tqdm(range(config.epochs), desc="train", disable=not show_progress):
        order = rng.permutation(points.shape[0])
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            batch_rows = rows[batch].copy()
            dropped = rng.random(batch.size) < config.cond_dropout
            batch_rows[dropped] = null_row

            inputs, target = _noisy_batch(points[batch], batch_rows, schedule, rng)
            _, grads = _loss_and_grads(model, params, inputs, target)
            for name in PARAMETER_NAMES:
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * grads[name]
                params[name] += velocity[name]

        holdout_loss, _ = _loss_and_grads(model, params, holdout_inputs, holdout_target, with_grads=False)
        losses.append(holdout_loss)
        logger.debug("epoch %d held-out loss %.6f", epoch + 1, holdout_loss)

    final_loss = losses[-1] if losses else initial_loss
    logger.info("mlp training done: held-out loss %.6f -> %.6f", initial_loss, final_loss)

    history = {"initial_loss": initial_loss, "final_loss": final_loss, "epoch_losses": losses}
    return MlpDenoiser(params, dim, labels, schedule, config.frequencies, asdict(config), history)
