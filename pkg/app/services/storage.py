# app/services/storage.py
"""Header-plus-blob persistence for trajectories and predictors.

File layout (both kinds):

    line 1   magic and version, e.g. ``SPDINV-TRAJ 1``
    line 2   JSON header (sorted keys, UTF-8) ending in a newline
    rest     little-endian float64 blob; arrays stored back to back in the
             order listed by the header's ``arrays`` entry as [name, shape]
"""
import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.services.errors import FormatError
from app.services.gaussian_mixture import GaussianMixtureModel
from app.services.linear_model import LinearModel
from app.services.mlp_denoiser import MlpDenoiser
from app.services.predictor import EpsilonPredictor, ZeroPredictor
from app.services.sampler import DIRECTIONS, Trajectory
from app.services.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

TRAJECTORY_MAGIC = "SPDINV-TRAJ"
MODEL_MAGIC = "SPDINV-MODEL"
FORMAT_VERSION = 1

TRAJECTORY_ARRAYS = ("states", "epsilons", "initial_residuals", "final_residuals",
                     "rounds", "predictor_calls")

PREDICTOR_KINDS = {
    ZeroPredictor.kind: ZeroPredictor,
    GaussianMixtureModel.kind: GaussianMixtureModel,
    LinearModel.kind: LinearModel,
    MlpDenoiser.kind: MlpDenoiser,
}


def _write(path: str, magic: str, header: Dict[str, Any], arrays: Dict[str, np.ndarray]):
    layout: List[List[Any]] = []
    chunks: List[bytes] = []
    for name, values in arrays.items():
        values = np.asarray(values, dtype=np.float64)
        layout.append([name, list(values.shape)])
        chunks.append(values.astype("<f8").tobytes())
    header = dict(header, arrays=layout, byteorder="<f8")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"{magic} {FORMAT_VERSION}\n".encode("ascii"))
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for chunk in chunks:
            handle.write(chunk)


def _read(path: str, magic: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise FormatError("path", f"cannot read {path}: {exc}") from exc

    first_end = raw.find(b"\n")
    second_end = raw.find(b"\n", first_end + 1) if first_end >= 0 else -1
    if first_end < 0 or second_end < 0:
        raise FormatError("header", "file is missing the magic or header line")

    tag = raw[:first_end].decode("ascii", errors="replace").split()
    if len(tag) != 2 or tag[0] != magic:
        raise FormatError("magic", f"expected {magic!r}, found {' '.join(tag)!r}")
    if tag[1] != str(FORMAT_VERSION):
        raise FormatError("version", f"unsupported version {tag[1]}, expected {FORMAT_VERSION}")

    try:
        header = json.loads(raw[first_end + 1:second_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"header is not valid JSON: {exc}") from exc
    if header.get("byteorder") != "<f8":
        raise FormatError("byteorder", f"expected '<f8', found {header.get('byteorder')!r}")
    layout = header.get("arrays")
    if not isinstance(layout, list):
        raise FormatError("arrays", "header does not list the stored arrays")

    blob = raw[second_end + 1:]
    expected = sum(8 * int(np.prod(shape, dtype=np.int64)) for _, shape in layout)
    if len(blob) != expected:
        raise FormatError("blob", f"expected {expected} bytes, found {len(blob)}")

    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[name] = values.astype(np.float64).reshape(shape)
        offset += 8 * count
    return header, arrays


def _require(header: Dict[str, Any], keys) -> None:
    for key in keys:
        if key not in header:
            raise FormatError(key, "missing from header")


def save_trajectory(path: str, trajectory: Trajectory) -> str:
    header = {
        "dim": trajectory.dim,
        "total_steps": trajectory.total_steps,
        "direction": trajectory.direction,
        "condition": trajectory.condition,
        "schedule_hash": trajectory.schedule_hash,
        "method": trajectory.method,
        "guidance": trajectory.guidance,
    }
    arrays = {name: getattr(trajectory, name) for name in TRAJECTORY_ARRAYS}
    _write(path, TRAJECTORY_MAGIC, header, arrays)
    logger.debug("saved %s trajectory to %s", trajectory.method, path)
    return path


def load_trajectory(path: str) -> Trajectory:
    header, arrays = _read(path, TRAJECTORY_MAGIC)
    _require(header, ("dim", "total_steps", "direction", "condition", "schedule_hash",
                      "method", "guidance"))
    if header["direction"] not in DIRECTIONS:
        raise FormatError("direction", f"unknown direction {header['direction']!r}")
    for name in TRAJECTORY_ARRAYS:
        if name not in arrays:
            raise FormatError(name, "array missing from blob")

    steps, dim = int(header["total_steps"]), int(header["dim"])
    if arrays["states"].shape != (steps + 1, dim):
        raise FormatError("states", f"shape {arrays['states'].shape} does not match T={steps}, d={dim}")

    return Trajectory(
        states=arrays["states"],
        direction=header["direction"],
        condition=header["condition"],
        schedule_hash=header["schedule_hash"],
        method=header["method"],
        guidance=header["guidance"],
        epsilons=arrays["epsilons"],
        initial_residuals=arrays["initial_residuals"],
        final_residuals=arrays["final_residuals"],
        rounds=arrays["rounds"].astype(np.int64),
        predictor_calls=arrays["predictor_calls"].astype(np.int64),
    )


def save_model(path: str, predictor: EpsilonPredictor, seed: Optional[int] = None) -> str:
    meta, arrays = predictor.state()
    header = {
        "kind": predictor.kind,
        "dim": predictor.dim,
        "schedule_hash": predictor.schedule_hash,
        "seed": seed,
        "meta": meta,
    }
    _write(path, MODEL_MAGIC, header, arrays)
    logger.info("saved %s model to %s", predictor.kind, path)
    return path


def load_model(path: str, schedule: Optional[NoiseSchedule] = None) -> EpsilonPredictor:
    """Rebuild a predictor; binds it to `schedule` when one is given"""
    header, arrays = _read(path, MODEL_MAGIC)
    _require(header, ("kind", "dim", "meta"))
    kind = header["kind"]
    if kind not in PREDICTOR_KINDS:
        raise FormatError("kind", f"unknown predictor kind {kind!r}")

    predictor = PREDICTOR_KINDS[kind].from_state(header["meta"], arrays)
    if predictor.dim != header["dim"]:
        raise FormatError("dim", f"header says {header['dim']}, parameters give {predictor.dim}")
    if schedule is not None and predictor.schedule_hash not in (None, schedule.hash):
        logger.info("rebinding %s model from schedule %s to %s",
                    kind, predictor.schedule_hash, schedule.hash)
        predictor = predictor.with_schedule(schedule)
    elif schedule is not None and kind == LinearModel.kind:
        predictor = predictor.with_schedule(schedule)
    return predictor
