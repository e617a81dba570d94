# app/services/report.py
import csv
import json
import logging
import math
import os
from dataclasses import asdict
from typing import Any, Dict, Iterable, List, Mapping, Optional

import numpy as np

from app.services.errors import FormatError
from app.services.inversion import AIDI, NAIVE, SPDINV
from app.services.storage import save_model, save_trajectory

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"
GAP_TABLE_FILE = "gap_table.csv"
ABLATION_FILE = "ablation.csv"
MODEL_FILE = "model.bin"
TRAJECTORY_DIR = "trajectories"

# pass/fail thresholds of the summary checks
NOISE_GAP_RATIO_MAX = 0.75
EDIT_WIN_RATE_MIN = 0.7
AIDI_STEP_WIN_RATE_MIN = 0.6


def json_safe(value: Any) -> Any:
    """Plain JSON types; non-finite floats become null"""
    if isinstance(value, Mapping):
        return {str(key): json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(path: str, payload: Any) -> str:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(json_safe(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def _check(value: Any, threshold: Optional[float], passed: Optional[bool]) -> Dict[str, Any]:
    return {"value": value, "threshold": threshold, "passed": passed}


def _paired(result, first: str, second: str):
    """Trials where both methods succeeded"""
    return [(o.methods[first], o.methods[second]) for o in result.outcomes
            if first in o.methods and second in o.methods]


def build_summary(result) -> Dict[str, Any]:
    """Aggregate table plus the directional checks (noise gap, reconstruction, edit, budget, early stop, coupling)"""
    reports = result.reports
    methods = {}
    for method, report in reports.items():
        methods[method] = {
            "successful_trials": report.successful_trials,
            "failed_trials": report.failed_trials,
            "final_gap": report.final_gap,
            "reconstruction_mse": report.reconstruction_mse,
            "reconstruction_psnr": report.reconstruction_psnr,
            "mean_initial_residual": report.mean_initial_residual,
            "mean_final_residual": report.mean_final_residual,
            "mean_rounds": report.mean_rounds,
            "mean_predictor_calls": report.mean_predictor_calls,
            "mean_edit_divergence": report.mean_edit_divergence,
            "coupling_mean": report.coupling_mean,
            "coupling_abs_mean": report.coupling_abs_mean,
            "coupling_excess_abs_mean": report.coupling_excess_abs_mean,
        }
    ranked = sorted((report.final_gap, method) for method, report in reports.items()
                    if report.final_gap is not None)

    checks: Dict[str, Any] = {}
    naive, spd, aidi = reports.get(NAIVE), reports.get(SPDINV), reports.get(AIDI)

    if naive and spd and naive.final_gap is not None and spd.final_gap is not None:
        ratio = spd.final_gap / naive.final_gap if naive.final_gap > 0 else None
        checks["noise_gap_ratio"] = _check(ratio, NOISE_GAP_RATIO_MAX,
                                           None if ratio is None else ratio <= NOISE_GAP_RATIO_MAX)
        checks["reconstruction"] = _check(
            {NAIVE: naive.reconstruction_mse, SPDINV: spd.reconstruction_mse}, None,
            spd.reconstruction_mse <= naive.reconstruction_mse,
        )
        pairs = _paired(result, SPDINV, NAIVE)
        if pairs:
            wins = sum(1 for s, n in pairs if s.edit_divergence < n.edit_divergence)
            rate = wins / len(pairs)
            checks["edit_win_rate"] = _check(rate, EDIT_WIN_RATE_MIN, rate >= EDIT_WIN_RATE_MIN)
        if spd.coupling_excess_abs_mean is not None and naive.coupling_excess_abs_mean is not None:
            # measured against the coupling the generating code already carries
            checks["coupling"] = _check(
                {NAIVE: naive.coupling_excess_abs_mean, SPDINV: spd.coupling_excess_abs_mean}, None,
                spd.coupling_excess_abs_mean < naive.coupling_excess_abs_mean,
            )

    if spd and aidi:
        pairs = _paired(result, SPDINV, AIDI)
        if pairs:
            spd_final = np.stack([s.inverted.final_residuals for s, _ in pairs])
            aidi_final = np.stack([a.inverted.final_residuals for _, a in pairs])
            rate = float(np.mean(spd_final <= aidi_final))
            checks["aidi_step_win_rate"] = _check(rate, AIDI_STEP_WIN_RATE_MIN,
                                                  rate >= AIDI_STEP_WIN_RATE_MIN)

    if spd and spd.residual_profile:
        rounds = np.asarray(spd.residual_profile["rounds"])
        half = rounds.size // 2
        if 0 < half < rounds.size:
            # index t - 1 holds step t; late steps are t > T / 2
            early, late = float(rounds[:half].mean()), float(rounds[half:].mean())
            checks["early_stop_asymmetry"] = _check({"early": early, "late": late}, None, late < early)

    return {
        "seed": result.config.seed,
        "trials": result.config.trials,
        "total_steps": result.schedule.total_steps,
        "schedule_hash": result.schedule.hash,
        "predictor": result.predictor.kind,
        "methods": methods,
        "ranking": [method for _, method in ranked],
        "checks": checks,
        "failures": len(result.failures),
    }


def gap_rows(per_method: Mapping[str, Iterable[float]]) -> List[List[Any]]:
    rows = []
    for method, gaps in per_method.items():
        for t, gap in enumerate(gaps):
            rows.append([t, method, repr(float(gap)) if gap is not None else ""])
    return rows


def write_gap_table(path: str, per_method: Mapping[str, Iterable[float]]) -> str:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["t", "method", "gap"])
        writer.writerows(gap_rows(per_method))
    return path


def write_outputs(result, out_dir: str) -> Dict[str, str]:
    """report.json, summary.json, gap_table.csv, timing.json, model and trajectories"""
    os.makedirs(out_dir, exist_ok=True)
    written = {}

    report = {
        "config": result.config.to_dict(),
        "schedule": result.schedule.to_dict(),
        "predictor": result.predictor.describe(),
        "reports": {method: report.to_dict() for method, report in result.reports.items()},
        "failures": result.failures,
    }
    written["report"] = write_json(os.path.join(out_dir, REPORT_FILE), report)
    written["summary"] = write_json(os.path.join(out_dir, SUMMARY_FILE), build_summary(result))
    written["timing"] = write_json(os.path.join(out_dir, TIMING_FILE), result.timing)
    written["gap_table"] = write_gap_table(
        os.path.join(out_dir, GAP_TABLE_FILE),
        {method: report.per_step_gap for method, report in result.reports.items()},
    )
    written["model"] = save_model(os.path.join(out_dir, MODEL_FILE), result.predictor, result.config.seed)

    saved = 0
    for outcome in result.outcomes:
        if outcome.truth is None:
            continue
        prefix = os.path.join(out_dir, TRAJECTORY_DIR, f"trial_{outcome.index:04d}")
        save_trajectory(f"{prefix}_truth.traj", outcome.truth)
        for method, method_outcome in outcome.methods.items():
            save_trajectory(f"{prefix}_{method}.traj", method_outcome.inverted)
        saved += 1

    logger.info("wrote %s (%d trial trajectories)", ", ".join(sorted(written)), saved)
    return written


def write_ablation(rows, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ABLATION_FILE)
    records = [asdict(row) for row in rows]
    columns = list(records[0]) if records else []
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for record in records:
            writer.writerow(["" if record[c] is None else record[c] for c in columns])
    logger.info("wrote %s (%d rows)", path, len(records))
    return path


def load_report(in_dir: str) -> Dict[str, Any]:
    path = os.path.join(in_dir, REPORT_FILE)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            report = json.load(handle)
    except OSError as exc:
        raise FormatError("path", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError("report", f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(report, dict) or "reports" not in report:
        raise FormatError("reports", f"{path} has no per-method reports")
    return report


def print_report_statistics(report: Mapping[str, Any]):
    """Console table of the per-method aggregates"""
    print("\n=== Inversion Report ===")
    config = report.get("config", {})
    print(f"Trials: {config.get('trials')}  Seed: {config.get('seed')}  "
          f"Predictor: {report.get('predictor', {}).get('kind')}")
    for method, entry in report["reports"].items():
        print(f"\n[{method}]")
        print(f"  successful / failed trials: {entry.get('successful_trials')} / {entry.get('failed_trials')}")
        print(f"  final noise gap:            {_fmt(entry.get('final_gap'))}")
        print(f"  reconstruction MSE / PSNR:  {_fmt(entry.get('reconstruction_mse'))} / "
              f"{_fmt(entry.get('reconstruction_psnr'))}")
        print(f"  residual L0 -> Lf:          {_fmt(entry.get('mean_initial_residual'))} -> "
              f"{_fmt(entry.get('mean_final_residual'))}")
        print(f"  mean rounds / calls:        {_fmt(entry.get('mean_rounds'))} / "
              f"{_fmt(entry.get('mean_predictor_calls'))}")
        print(f"  mean edit divergence:       {_fmt(entry.get('mean_edit_divergence'))}")
        if entry.get("coupling_mean") is not None:
            print(f"  coupling (signed / |.|):    {_fmt(entry.get('coupling_mean'))} / "
                  f"{_fmt(entry.get('coupling_abs_mean'))}")
        if entry.get("coupling_excess_abs_mean") is not None:
            print(f"  coupling excess |.|:        {_fmt(entry.get('coupling_excess_abs_mean'))}")
    print("=" * 24)


def _fmt(value: Any) -> str:
    return "n/a" if value is None else f"{value:.6g}"
