import json
import os

import numpy as np
import pytest

from app.services.errors import FormatError
from app.services.inversion import SPDInvConfig, invert
from app.services.linear_model import LinearModel
from app.services.mlp_denoiser import MlpDenoiser
from app.services.predictor import NULL, ZeroPredictor
from app.services.sampler import generate
from app.services.storage import load_model, load_trajectory, save_model, save_trajectory


@pytest.fixture
def inverted(mixture, schedule, rng):
    return invert(rng.standard_normal(2), 1, mixture, schedule, SPDInvConfig(max_rounds=5))


def _header_lines(path):
    with open(path, "rb") as handle:
        raw = handle.read()
    first, rest = raw.split(b"\n", 1)
    second, blob = rest.split(b"\n", 1)
    return first, second, blob


def test_trajectory_survives_a_save_load_cycle(inverted, tmp_path):
    path = save_trajectory(str(tmp_path / "run" / "spd.traj"), inverted)
    loaded = load_trajectory(path)
    assert loaded.method == "spdinv"
    assert loaded.condition == 1
    assert loaded.schedule_hash == inverted.schedule_hash
    for name in ("states", "epsilons", "initial_residuals", "final_residuals", "rounds", "predictor_calls"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(inverted, name))
    assert loaded.rounds.dtype == np.int64


def test_trajectory_header_layout(mixture, schedule, rng, tmp_path):
    truth = generate(rng.standard_normal(2), NULL, mixture, schedule)
    path = save_trajectory(str(tmp_path / "truth.traj"), truth)
    first, second, blob = _header_lines(path)
    assert first == b"SPDINV-TRAJ 1"
    header = json.loads(second)
    assert list(header) == sorted(header)
    assert header["byteorder"] == "<f8"
    assert header["condition"] is None
    assert header["arrays"][0] == ["states", [51, 2]]
    assert len(blob) == 8 * (51 * 2 + 50 * 2 + 4 * 50)


def test_predictors_survive_a_save_load_cycle(mixture, schedule, short_schedule, tmp_path):
    predictors = [
        mixture,
        LinearModel(np.array([[0.5, 0.1], [0.0, 0.4]]), [0.1, -0.1], short_schedule),
        MlpDenoiser.initialize(2, (0, 1), schedule, np.random.default_rng(8), hidden=8),
        ZeroPredictor(2),
    ]
    z = np.array([0.3, -1.2])
    for index, predictor in enumerate(predictors):
        path = save_model(str(tmp_path / f"model_{index}.bin"), predictor, seed=17)
        loaded = load_model(path)
        assert loaded.kind == predictor.kind
        np.testing.assert_array_equal(loaded.predict(z, 5), predictor.predict(z, 5))
        assert loaded.schedule_hash == predictor.schedule_hash


def test_load_model_rebinds_to_requested_schedule(mixture, short_schedule, tmp_path):
    path = save_model(str(tmp_path / "model.bin"), mixture)
    loaded = load_model(path, short_schedule)
    assert loaded.schedule_hash == short_schedule.hash
    assert loaded.schedule.total_steps == 10


def test_truncated_blob_is_rejected(inverted, tmp_path):
    path = save_trajectory(str(tmp_path / "cut.traj"), inverted)
    size = os.path.getsize(path)
    with open(path, "r+b") as handle:
        handle.truncate(size - 8)
    with pytest.raises(FormatError) as err:
        load_trajectory(path)
    assert err.value.field == "blob"


@pytest.mark.parametrize("first_line, field", [
    (b"SPDINV-MODEL 1", "magic"),
    (b"SPDINV-TRAJ 2", "version"),
    (b"garbage", "magic"),
])
def test_bad_magic_line_is_rejected(inverted, tmp_path, first_line, field):
    path = save_trajectory(str(tmp_path / "bad.traj"), inverted)
    _, second, blob = _header_lines(path)
    with open(path, "wb") as handle:
        handle.write(first_line + b"\n" + second + b"\n" + blob)
    with pytest.raises(FormatError) as err:
        load_trajectory(path)
    assert err.value.field == field


def test_bad_header_is_rejected(inverted, tmp_path):
    path = save_trajectory(str(tmp_path / "bad.traj"), inverted)
    first, _, blob = _header_lines(path)
    with open(path, "wb") as handle:
        handle.write(first + b"\n{not json\n" + blob)
    with pytest.raises(FormatError) as err:
        load_trajectory(path)
    assert err.value.field == "header"


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(FormatError) as err:
        load_model(str(tmp_path / "absent.bin"))
    assert err.value.field == "path"


def test_unknown_predictor_kind(tmp_path):
    path = str(tmp_path / "odd.bin")
    header = {"arrays": [], "byteorder": "<f8", "dim": 2, "kind": "transformer", "meta": {}}
    with open(path, "wb") as handle:
        handle.write(b"SPDINV-MODEL 1\n" + json.dumps(header).encode("utf-8") + b"\n")
    with pytest.raises(FormatError) as err:
        load_model(path)
    assert err.value.field == "kind"
