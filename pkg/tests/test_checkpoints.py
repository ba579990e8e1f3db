import json

import numpy as np
import pytest

from madctx.checkpoints import (
    CHECKPOINT_VERSION,
    generator_name,
    load_distilled,
    load_duals,
    load_generator,
    load_generators,
    load_projection,
    save_all,
    save_generator,
)
from madctx.context import DistilledProjector, ProjectionModel
from madctx.evolution import DualState, InstructionGenerator
from madctx.exceptions import CheckpointError


@pytest.fixture
def trained(rng):
    projection = ProjectionModel(rng.standard_normal((8, 32)), rng.standard_normal(8))
    distilled = DistilledProjector(rng.standard_normal((8, 48)), rng.standard_normal(8))
    generators = [InstructionGenerator.initial(8, 3, agent_id=i, seed=11) for i in range(3)]
    duals = [DualState(alpha=0.5 * i, beta=1.0) for i in range(3)]
    return projection, distilled, generators, duals


def test_save_all_restores_every_parameter_exactly(trained, tmp_path):
    projection, distilled, generators, duals = trained
    save_all(tmp_path, projection, distilled, generators, duals, seed=11)

    restored = load_projection(tmp_path)
    np.testing.assert_array_equal(restored.weights, projection.weights)
    np.testing.assert_array_equal(restored.bias, projection.bias)
    np.testing.assert_array_equal(load_distilled(tmp_path).weights, distilled.weights)
    for original, loaded in zip(generators, load_generators(tmp_path, 3)):
        np.testing.assert_array_equal(loaded.weights, original.weights)
        np.testing.assert_array_equal(loaded.bias, original.bias)
        assert (loaded.agent_id, loaded.seed) == (original.agent_id, 11)
    assert [d.alpha for d in load_duals(tmp_path)] == [0.0, 0.5, 1.0]


def test_payload_is_little_endian_float64(trained, tmp_path):
    gen = trained[2][0]
    save_generator(gen, tmp_path)
    raw = (tmp_path / f"{generator_name(0)}.bin").read_bytes()
    assert len(raw) == 8 * (gen.weights.size + gen.bias.size)
    np.testing.assert_array_equal(np.frombuffer(raw[:8 * gen.weights.size], dtype="<f8"), gen.weights.ravel())


def test_sidecar_is_sorted_and_versioned(trained, tmp_path):
    save_generator(trained[2][1], tmp_path)
    text = (tmp_path / "generator-01.json").read_text()
    meta = json.loads(text)
    assert list(meta) == sorted(meta)
    assert meta == {"agent_id": 1, "d_model": 8, "n_tokens": 3, "seed": 11, "version": CHECKPOINT_VERSION}
    assert text.startswith('{\n  "agent_id"')


def test_missing_sidecar_is_reported(tmp_path):
    with pytest.raises(CheckpointError):
        load_generator(tmp_path, 0)


def test_truncated_payload_is_reported(trained, tmp_path):
    save_generator(trained[2][0], tmp_path)
    path = tmp_path / "generator-00.bin"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_generator(tmp_path, 0)


def test_version_mismatch_is_reported(trained, tmp_path):
    projection, distilled, generators, duals = trained
    save_all(tmp_path, projection, distilled, generators, duals, seed=0)
    path = tmp_path / "projection.json"
    meta = json.loads(path.read_text())
    meta["version"] = CHECKPOINT_VERSION + 1
    path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError):
        load_projection(tmp_path)
