# app/services/experiment.py
import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from config import Config
from app.services.errors import ConfigError, DivergenceError, ExperimentFailedError, InversionError
from app.services.gaussian_mixture import GaussianMixtureModel, default_mixture
from app.services.inversion import AIDI, METHODS, NAIVE, SPDINV, SPDInvConfig, invert
from app.services.linear_model import LinearModel
from app.services.metrics import GapReport, coupling_score, edit_divergence, noise_gap, reconstruction_gap
from app.services.mlp_denoiser import train_mlp
from app.services.predictor import Condition, EpsilonPredictor, ZeroPredictor, guidance_cost
from app.services.report import write_ablation, write_outputs
from app.services.sampler import Trajectory, generate
from app.services.schedule import NoiseSchedule, build_linear_schedule
from app.services.storage import load_model

logger = logging.getLogger(__name__)

# ablation grid keys -> (section, field)
GRID_KEYS = {
    "k": ("inversion", "max_rounds"),
    "delta": ("inversion", "threshold"),
    "eta": ("inversion", "learning_rate"),
    "T": ("schedule", "inference_steps"),
    "w": ("inversion", "guidance"),
}


def _as_float(value: Any, name: str) -> float:
    # YAML reads "1e-4" as a string
    try:
        result = float(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if not math.isfinite(result):
        raise ConfigError(name, f"must be finite, got {value!r}")
    return result


def _as_int(value: Any, name: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    try:
        result = int(value)
    except (TypeError, ValueError, OverflowError):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if result != _as_float(value, name):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if minimum is not None and result < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {result}")
    return result


def _as_bool(value: Any, name: str) -> bool:
    # bool("false") is True, so strings are refused
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    raise ConfigError(name, f"expected true or false, got {value!r}")


def _condition(value: Any, name: str) -> Condition:
    if value is None or (isinstance(value, str) and value.lower() in ("null", "none")):
        return None
    return _as_int(value, name)


def default_predictor_spec() -> Dict[str, Any]:
    return {
        "kind": "gaussian_mixture",
        "means": [[2.0, 2.0], [-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0]],
        "weights": None,
        "sigma0_sq": 0.1,
        "conditions": {"0": [0, 1], "1": [2, 3]},
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    trials: int = 100
    schedule: Dict[str, Any] = field(default_factory=lambda: {
        "num_train_steps": Config.NUM_TRAIN_STEPS,
        "beta_start": Config.BETA_START,
        "beta_end": Config.BETA_END,
        "inference_steps": Config.INFERENCE_STEPS,
    })
    predictor: Dict[str, Any] = field(default_factory=default_predictor_spec)
    condition_pairs: List[Tuple[Condition, Condition]] = field(default_factory=lambda: [(0, 1), (1, 0)])
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    inversion: Dict[str, Any] = field(default_factory=lambda: {
        "max_rounds": Config.MAX_ROUNDS,
        "threshold": Config.THRESHOLD,
        "learning_rate": Config.LEARNING_RATE,
        "guidance": Config.GUIDANCE_SCALE,
        "aidi_rounds": Config.AIDI_ROUNDS,
        "stop_gradient": False,
        "divergence_factor": Config.DIVERGENCE_FACTOR,
        "divergence_floor": Config.DIVERGENCE_FLOOR,
    })
    guidance_scale: float = 1.0
    edit_guidance_scale: float = 1.0
    budget_matched: bool = False
    ablation: Dict[str, List[float]] = field(default_factory=dict)
    output_dir: str = ""
    save_trajectories: int = Config.SAVE_TRAJECTORIES
    workers: int = Config.WORKERS

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        """Validate a parsed config file; unknown keys are rejected by name"""
        if not isinstance(data, Mapping):
            raise ConfigError("config", "top level must be a mapping")
        defaults = cls()
        known = set(defaults.__dict__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")

        schedule = dict(defaults.schedule)
        schedule.update(data.get("schedule") or {})
        schedule = {
            "num_train_steps": _as_int(schedule["num_train_steps"], "schedule.num_train_steps", 1),
            "beta_start": _as_float(schedule["beta_start"], "schedule.beta_start"),
            "beta_end": _as_float(schedule["beta_end"], "schedule.beta_end"),
            "inference_steps": _as_int(schedule["inference_steps"], "schedule.inference_steps", 1),
        }

        inversion = dict(defaults.inversion)
        inversion.update(data.get("inversion") or {})
        unknown = sorted(set(inversion) - set(defaults.inversion))
        if unknown:
            raise ConfigError(f"inversion.{unknown[0]}", "unknown inversion key")
        inversion = {
            "max_rounds": _as_int(inversion["max_rounds"], "inversion.max_rounds", 0),
            "threshold": _as_float(inversion["threshold"], "inversion.threshold"),
            "learning_rate": _as_float(inversion["learning_rate"], "inversion.learning_rate"),
            "guidance": _as_float(inversion["guidance"], "inversion.guidance"),
            "aidi_rounds": _as_int(inversion["aidi_rounds"], "inversion.aidi_rounds", 1),
            "stop_gradient": _as_bool(inversion["stop_gradient"], "inversion.stop_gradient"),
            "divergence_factor": _as_float(inversion["divergence_factor"], "inversion.divergence_factor"),
            "divergence_floor": _as_float(inversion["divergence_floor"], "inversion.divergence_floor"),
        }

        predictor = data.get("predictor", defaults.predictor)
        if not isinstance(predictor, Mapping) or "kind" not in predictor:
            raise ConfigError("predictor", "must be a mapping with a 'kind'")

        methods = list(data.get("methods", defaults.methods))
        if not methods:
            raise ConfigError("methods", "at least one method is required")
        for method in methods:
            if method not in METHODS:
                raise ConfigError("methods", f"unknown method {method!r}, expected one of {list(METHODS)}")

        pairs = []
        for i, pair in enumerate(data.get("condition_pairs", defaults.condition_pairs)):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"condition_pairs[{i}]", "expected a [source, target] pair")
            pairs.append((_condition(pair[0], f"condition_pairs[{i}]"),
                          _condition(pair[1], f"condition_pairs[{i}]")))
        if not pairs:
            raise ConfigError("condition_pairs", "at least one pair is required")

        ablation = {}
        for key, values in (data.get("ablation") or {}).items():
            if key not in GRID_KEYS:
                raise ConfigError(f"ablation.{key}", f"unknown grid key, expected one of {list(GRID_KEYS)}")
            ablation[key] = _grid_values(key, values)

        config = cls(
            seed=_as_int(data.get("seed", defaults.seed), "seed", 0),
            trials=_as_int(data.get("trials", defaults.trials), "trials", 1),
            schedule=schedule,
            predictor=dict(predictor),
            condition_pairs=pairs,
            methods=methods,
            inversion=inversion,
            guidance_scale=_as_float(data.get("guidance_scale", defaults.guidance_scale), "guidance_scale"),
            edit_guidance_scale=_as_float(data.get("edit_guidance_scale", defaults.edit_guidance_scale),
                                          "edit_guidance_scale"),
            budget_matched=_as_bool(data.get("budget_matched", defaults.budget_matched), "budget_matched"),
            ablation=ablation,
            output_dir=str(data.get("output_dir", defaults.output_dir) or ""),
            save_trajectories=_as_int(data.get("save_trajectories", defaults.save_trajectories),
                                      "save_trajectories", 0),
            workers=_as_int(data.get("workers", defaults.workers), "workers", 1),
        )
        config.inversion_config(SPDINV)
        return config

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "schedule": dict(self.schedule),
            "predictor": copy.deepcopy(self.predictor),
            "condition_pairs": [list(pair) for pair in self.condition_pairs],
            "methods": list(self.methods),
            "inversion": dict(self.inversion),
            "guidance_scale": self.guidance_scale,
            "edit_guidance_scale": self.edit_guidance_scale,
            "budget_matched": self.budget_matched,
            "ablation": {key: list(values) for key, values in self.ablation.items()},
        }

    def inversion_config(self, method: str) -> SPDInvConfig:
        try:
            return SPDInvConfig(method=method, inference_steps=self.schedule["inference_steps"],
                                **self.inversion)
        except ConfigError as exc:
            raise ConfigError(f"inversion.{exc.field}", str(exc).split(": ", 1)[-1]) from exc

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with top-level fields replaced; `schedule` and `inversion` merge"""
        data = self.to_dict()
        data.update(output_dir=self.output_dir, save_trajectories=self.save_trajectories,
                    workers=self.workers)
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("schedule", "inversion"):
                section = dict(data[key])
                section.update(value)
                data[key] = section
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)


def _grid_values(key: str, values: Any) -> List[Any]:
    if isinstance(values, str):
        values = [part for part in values.split(",") if part.strip()]
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigError(f"ablation.{key}", "expected a non-empty list of values")
    name = f"ablation.{key}"
    if key in ("k", "T"):
        return [_as_int(value, name, 0 if key == "k" else 1) for value in values]
    parsed = [_as_float(value, name) for value in values]
    if key == "eta" and any(value <= 0 for value in parsed):
        raise ConfigError(name, "learning rates must be positive")
    if key == "delta" and any(value < 0 for value in parsed):
        raise ConfigError(name, "thresholds must be >= 0")
    return parsed


def load_experiment_config(path: str) -> ExperimentConfig:
    """Read a .json or .yaml/.yml experiment file"""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            if path.endswith((".yaml", ".yml")):
                data = yaml.safe_load(handle)
            else:
                data = json.load(handle)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data or {})


def build_schedule(config: ExperimentConfig) -> NoiseSchedule:
    return build_linear_schedule(**config.schedule)


def build_predictor(spec: Mapping[str, Any], schedule: NoiseSchedule) -> EpsilonPredictor:
    """Construct the predictor a config names (and train it, for an mlp without a path)"""
    kind = spec.get("kind")
    if kind == "zero":
        return ZeroPredictor(_as_int(spec.get("dim", 2), "predictor.dim", 1), spec.get("labels", ()))
    if kind == "gaussian_mixture":
        conditions = {int(label): members for label, members in (spec.get("conditions") or {}).items()}
        return GaussianMixtureModel(spec["means"], spec.get("weights"),
                                    _as_float(spec.get("sigma0_sq", 0.1), "predictor.sigma0_sq"),
                                    schedule, conditions)
    if kind == "linear":
        if "matrix" not in spec:
            raise ConfigError("predictor.matrix", "linear predictor needs a matrix")
        return LinearModel(spec["matrix"], spec.get("offset"), schedule)
    if kind == "mlp":
        if spec.get("path"):
            return load_model(spec["path"], schedule)
        return _train_predictor(spec.get("train") or {}, schedule)
    raise ConfigError("predictor.kind", f"unknown predictor kind {kind!r}")


def _train_predictor(spec: Mapping[str, Any], schedule: NoiseSchedule) -> EpsilonPredictor:
    mixture_spec = spec.get("mixture")
    if mixture_spec:
        mixture = build_predictor(dict(mixture_spec, kind="gaussian_mixture"), schedule)
    else:
        mixture = default_mixture(schedule)
    seed = _as_int(spec.get("seed", 0), "predictor.train.seed", 0)
    samples = _as_int(spec.get("samples", 2000), "predictor.train.samples", 1)

    points, labels = mixture.sample_labeled(samples, np.random.default_rng(seed))
    options = {key: spec[key] for key in ("batch_size", "momentum", "hidden", "embedding_dim",
                                          "frequencies", "cond_dropout", "holdout_size") if key in spec}
    return train_mlp(list(zip(points, labels)), schedule,
                     epochs=_as_int(spec.get("epochs", 40), "predictor.train.epochs", 0),
                     lr=_as_float(spec.get("learning_rate", 0.05), "predictor.train.learning_rate"),
                     seed=seed, labels=mixture.labels, show_progress=Config.SHOW_PROGRESS,
                     **options)


@dataclass
class MethodOutcome:
    method: str
    inverted: Trajectory
    gap: np.ndarray
    reconstruction_mse: float
    reconstruction_psnr: float
    edit_divergence: float
    coupling: Optional[float]
    # coupling of the recovered code minus that of the code that generated z_0
    coupling_excess: Optional[float]
    seconds: float


@dataclass
class TrialOutcome:
    index: int
    source: Condition
    target: Condition
    truth: Optional[Trajectory] = None
    methods: Dict[str, MethodOutcome] = field(default_factory=dict)
    failures: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    schedule: NoiseSchedule
    predictor: EpsilonPredictor
    outcomes: List[TrialOutcome]
    reports: Dict[str, GapReport]
    failures: List[Dict[str, Any]]
    timing: Dict[str, Any]

    @property
    def failed_methods(self) -> List[str]:
        return [method for method, report in self.reports.items() if report.successful_trials == 0]


class ExperimentRunner:
    """Runs every trial of a config and aggregates one GapReport per method"""

    def __init__(self, config: ExperimentConfig, predictor: Optional[EpsilonPredictor] = None,
                 show_progress: Optional[bool] = None):
        self.config = config
        self.schedule = build_schedule(config)
        if predictor is None:
            predictor = build_predictor(config.predictor, self.schedule)
        elif predictor.schedule_hash != self.schedule.hash:
            predictor = predictor.with_schedule(self.schedule)
        self.predictor = predictor
        self.show_progress = Config.SHOW_PROGRESS if show_progress is None else show_progress

        # fixed order so the baseline can read the spdinv budget of the same trial
        self.methods = [method for method in METHODS if method in config.methods]
        self.method_configs = {method: config.inversion_config(method) for method in METHODS}

        if predictor.labels:
            for pair in config.condition_pairs:
                for c in pair:
                    predictor.check_condition(c)
            self.pairs = list(config.condition_pairs)
        else:
            if any(c is not None for pair in config.condition_pairs for c in pair):
                logger.info("%s predictor has no condition labels, using NULL conditions", predictor.kind)
            self.pairs = [(None, None)]

    # -- single trial ----------------------------------------------------

    def _budget(self, truth: Trajectory, source: Condition,
                outcome: TrialOutcome) -> Optional[List[int]]:
        """Per-step aidi rounds matching the spdinv calls of this trial; None keeps aidi_rounds"""
        if not self.config.budget_matched:
            return None
        if SPDINV in outcome.methods:
            calls = outcome.methods[SPDINV].inverted.predictor_calls
        elif SPDINV in self.methods:
            logger.warning("trial %d: spdinv failed, aidi falls back to %d rounds per step",
                           outcome.index, self.method_configs[AIDI].aidi_rounds)
            return None
        else:
            try:
                calls = invert(truth.z0, source, self.predictor, self.schedule,
                               self.method_configs[SPDINV]).predictor_calls
            except InversionError as exc:
                logger.warning("trial %d: no spdinv budget (%s), aidi falls back to %d rounds per step",
                               outcome.index, exc, self.method_configs[AIDI].aidi_rounds)
                return None
        # aidi spends (rounds + 2) * cost calls per step
        cost = guidance_cost(source, self.method_configs[AIDI].guidance)
        return [max(1, int(n) // cost - 2) for n in calls]

    def _failure(self, index: int, method: str, exc: InversionError) -> Dict[str, Any]:
        logger.warning("trial %d method %s failed: %s", index, method, exc)
        return {
            "trial": index,
            "method": method,
            "step": exc.step,
            "error": type(exc).__name__,
            "message": str(exc),
        }

    def run_trial(self, index: int) -> TrialOutcome:
        rng = np.random.default_rng([self.config.seed, index])
        z_star = rng.standard_normal(self.predictor.dim)
        source, target = self.pairs[index % len(self.pairs)]
        outcome = TrialOutcome(index, source, target)

        try:
            truth = generate(z_star, source, self.predictor, self.schedule, self.config.guidance_scale)
            reference = generate(z_star, target, self.predictor, self.schedule,
                                 self.config.edit_guidance_scale).z0
        except InversionError as exc:
            for method in self.methods:
                outcome.failures.append(self._failure(index, method, exc))
            return outcome
        outcome.truth = truth
        ideal = None
        if isinstance(self.predictor, GaussianMixtureModel):
            ideal = coupling_score(z_star, source, self.predictor)

        for method in self.methods:
            aidi_rounds = self._budget(truth, source, outcome) if method == AIDI else None
            try:
                started = time.perf_counter()
                inverted = invert(truth.z0, source, self.predictor, self.schedule,
                                  self.method_configs[method], aidi_rounds)
                seconds = time.perf_counter() - started

                rebuilt = generate(inverted.zT, source, self.predictor, self.schedule,
                                   self.config.guidance_scale)
                mse, psnr = reconstruction_gap(truth.z0, rebuilt.z0)
                edit = edit_divergence(z_star, inverted.zT, target, self.predictor, self.schedule,
                                       self.config.edit_guidance_scale, reference=reference)
                coupling = excess = None
                if ideal is not None:
                    coupling = coupling_score(inverted.zT, source, self.predictor)
                    excess = coupling - ideal

                outcome.methods[method] = MethodOutcome(
                    method=method,
                    inverted=inverted,
                    gap=noise_gap(truth, inverted),
                    reconstruction_mse=mse,
                    reconstruction_psnr=psnr,
                    edit_divergence=edit,
                    coupling=coupling,
                    coupling_excess=excess,
                    seconds=seconds,
                )
            except InversionError as exc:
                outcome.failures.append(self._failure(index, method, exc))
        return outcome

    # -- batch -----------------------------------------------------------

    def run(self) -> ExperimentResult:
        config = self.config
        logger.info("experiment start: %d trials, methods=%s, predictor=%s, T=%d, seed=%d",
                    config.trials, self.methods, self.predictor.kind, self.schedule.total_steps, config.seed)
        indices = range(config.trials)
        progress = dict(total=config.trials, desc="trials", disable=not self.show_progress)

        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(tqdm(pool.map(self.run_trial, indices), **progress))
        else:
            outcomes = [self.run_trial(index) for index in tqdm(indices, **progress)]
        outcomes.sort(key=lambda outcome: outcome.index)

        # only the first save_trajectories trials keep their ground truth
        for outcome in outcomes:
            if outcome.index >= config.save_trajectories:
                outcome.truth = None

        failures = [failure for outcome in outcomes for failure in outcome.failures]
        reports = {method: self._aggregate(method, outcomes) for method in self.methods}
        timing = self._timing(outcomes)

        for method, report in reports.items():
            logger.info("%s: %d ok, %d failed, final gap %s, mean rounds %s",
                        method, report.successful_trials, report.failed_trials,
                        _fmt(report.final_gap), _fmt(report.mean_rounds))
        return ExperimentResult(config, self.schedule, self.predictor, outcomes, reports, failures, timing)

    def _aggregate(self, method: str, outcomes: Sequence[TrialOutcome]) -> GapReport:
        report = GapReport(method=method,
                           config=self.method_configs[method].to_dict(),
                           predictor=self.predictor.describe())
        done = [outcome.methods[method] for outcome in outcomes if method in outcome.methods]
        report.failures = [f for outcome in outcomes for f in outcome.failures if f["method"] == method]
        report.successful_trials = len(done)
        report.failed_trials = len(report.failures)

        for outcome in outcomes:
            result = outcome.methods.get(method)
            report.edit_divergence.append(None if result is None else result.edit_divergence)
            if result is None:
                continue
            inverted = result.inverted
            report.trials.append({
                "trial": outcome.index,
                "source": outcome.source,
                "target": outcome.target,
                "final_gap": float(result.gap[-1]),
                "reconstruction_mse": result.reconstruction_mse,
                "reconstruction_psnr": result.reconstruction_psnr,
                "edit_divergence": result.edit_divergence,
                "coupling": result.coupling,
                "coupling_excess": result.coupling_excess,
                "mean_initial_residual": float(inverted.initial_residuals.mean()),
                "mean_final_residual": float(inverted.final_residuals.mean()),
                "mean_rounds": float(inverted.rounds.mean()),
                "predictor_calls": int(inverted.predictor_calls.sum()),
            })
        if not done:
            return report

        gaps = np.stack([result.gap for result in done])
        initial = np.stack([result.inverted.initial_residuals for result in done])
        final = np.stack([result.inverted.final_residuals for result in done])
        rounds = np.stack([result.inverted.rounds for result in done]).astype(np.float64)
        calls = np.stack([result.inverted.predictor_calls for result in done]).astype(np.float64)
        psnr = [result.reconstruction_psnr for result in done if math.isfinite(result.reconstruction_psnr)]

        report.per_step_gap = gaps.mean(axis=0).tolist()
        report.final_gap = float(gaps[:, -1].mean())
        report.reconstruction_mse = float(np.mean([result.reconstruction_mse for result in done]))
        report.reconstruction_psnr = float(np.mean(psnr)) if psnr else None
        report.mean_initial_residual = float(initial.mean())
        report.mean_final_residual = float(final.mean())
        report.mean_rounds = float(rounds.mean())
        report.mean_predictor_calls = float(calls.sum(axis=1).mean())
        report.residual_profile = {
            "initial_residual": initial.mean(axis=0).tolist(),
            "final_residual": final.mean(axis=0).tolist(),
            "rounds": rounds.mean(axis=0).tolist(),
        }
        report.mean_edit_divergence = float(np.mean([result.edit_divergence for result in done]))
        couplings = [result.coupling for result in done if result.coupling is not None]
        if couplings:
            report.coupling_mean = float(np.mean(couplings))
            report.coupling_abs_mean = float(np.mean(np.abs(couplings)))
        excess = [result.coupling_excess for result in done if result.coupling_excess is not None]
        if excess:
            report.coupling_excess_abs_mean = float(np.mean(np.abs(excess)))
        return report

    def _timing(self, outcomes: Sequence[TrialOutcome]) -> Dict[str, Any]:
        timing = {}
        for method in self.methods:
            seconds = [o.methods[method].seconds for o in outcomes if method in o.methods]
            timing[method] = {
                "trials": len(seconds),
                "total_seconds": float(sum(seconds)),
                "mean_seconds": float(np.mean(seconds)) if seconds else None,
            }
        return timing


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   predictor: Optional[EpsilonPredictor] = None,
                   show_progress: Optional[bool] = None,
                   raise_on_failure: bool = True) -> ExperimentResult:
    """Run all trials, write the reports when out_dir is set, then fail if a method never succeeded"""
    runner = ExperimentRunner(config, predictor, show_progress)
    result = runner.run()
    if out_dir:
        write_outputs(result, out_dir)
    if raise_on_failure and result.failed_methods:
        raise ExperimentFailedError(f"every trial failed for: {', '.join(result.failed_methods)}")
    return result


@dataclass
class AblationRow:
    parameter: str
    value: float
    successful_trials: int
    failed_trials: int
    guard_trips: int
    final_gap: Optional[float]
    naive_final_gap: Optional[float]
    gap_ratio: Optional[float]
    mean_initial_residual: Optional[float]
    mean_final_residual: Optional[float]
    mean_rounds: Optional[float]


def run_ablation(config: ExperimentConfig, grid: Optional[Mapping[str, Sequence[Any]]] = None,
                 out_dir: Optional[str] = None,
                 show_progress: Optional[bool] = None) -> List[AblationRow]:
    """Vary one hyper-parameter at a time around the config, comparing spdinv to naive"""
    grid = dict(grid if grid is not None else config.ablation)
    if not grid:
        raise ConfigError("ablation", "no grid values given")
    grid = {key: _grid_values(key, values) for key, values in grid.items() if _known_key(key)}

    base_schedule = build_schedule(config)
    base_predictor = build_predictor(config.predictor, base_schedule)
    rows: List[AblationRow] = []

    for key, values in grid.items():
        section, name = GRID_KEYS[key]
        for value in values:
            variant = config.with_overrides(**{
                section: {name: value},
                "methods": [NAIVE, SPDINV],
                "budget_matched": False,
                "save_trajectories": 0,
            })
            result = run_experiment(variant, predictor=base_predictor, show_progress=show_progress,
                                    raise_on_failure=False)
            rows.append(_ablation_row(key, value, result))
            row = rows[-1]
            logger.info("ablation %s=%s: gap %s (naive %s), rounds %s, guard trips %d",
                        key, value, _fmt(row.final_gap), _fmt(row.naive_final_gap),
                        _fmt(row.mean_rounds), row.guard_trips)

    if out_dir:
        write_ablation(rows, out_dir)
    return rows


def _known_key(key: str) -> bool:
    if key not in GRID_KEYS:
        raise ConfigError(f"grid.{key}", f"unknown grid key, expected one of {list(GRID_KEYS)}")
    return True


def _ablation_row(key: str, value: Any, result: ExperimentResult) -> AblationRow:
    spd = result.reports[SPDINV]
    naive = result.reports[NAIVE]
    trips = sum(1 for failure in spd.failures if failure["error"] == DivergenceError.__name__)
    ratio = None
    if spd.final_gap is not None and naive.final_gap:
        ratio = spd.final_gap / naive.final_gap
    return AblationRow(
        parameter=key,
        value=value,
        successful_trials=spd.successful_trials,
        failed_trials=spd.failed_trials,
        guard_trips=trips,
        final_gap=spd.final_gap,
        naive_final_gap=naive.final_gap,
        gap_ratio=ratio,
        mean_initial_residual=spd.mean_initial_residual,
        mean_final_residual=spd.mean_final_residual,
        mean_rounds=spd.mean_rounds,
    )
