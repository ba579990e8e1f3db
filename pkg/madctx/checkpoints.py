"""
Checkpoint files: little-endian float64 payloads with JSON sidecars.

    <name>.bin   raw parameters, row-major
    <name>.json  shape metadata, sorted keys, 2-space indent
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from madctx.context import DistilledProjector, ProjectionModel
from madctx.evolution import DualState, InstructionGenerator
from madctx.exceptions import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LE_FLOAT64 = np.dtype("<f8")

PROJECTION_NAME = "projection"
DISTILLED_NAME = "distilled"
DUALS_NAME = "duals.json"


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"Missing checkpoint sidecar {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"Malformed checkpoint sidecar {path}: {exc}") from exc


def _write_arrays(path: Path, arrays: List[np.ndarray]) -> None:
    payload = np.concatenate([np.ascontiguousarray(a, dtype=np.float64).ravel() for a in arrays])
    path.write_bytes(payload.astype(LE_FLOAT64).tobytes())


def _read_arrays(path: Path, shapes: List[Tuple[int, ...]]) -> List[np.ndarray]:
    try:
        flat = np.frombuffer(path.read_bytes(), dtype=LE_FLOAT64).astype(np.float64)
    except FileNotFoundError as exc:
        raise CheckpointError(f"Missing checkpoint payload {path}") from exc
    expected = sum(int(np.prod(shape)) for shape in shapes)
    if flat.shape[0] != expected:
        raise CheckpointError(f"{path} holds {flat.shape[0]} values, expected {expected}")
    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    return arrays


def _check_version(meta: Dict, path: Path) -> None:
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}")


def save_affine(model, directory, name: str, seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_arrays(directory / f"{name}.bin", [model.weights, model.bias])
    _write_json(
        directory / f"{name}.json",
        {
            "kind": model.kind,
            "d_model": model.output_dim,
            "input_dim": model.input_dim,
            "seed": seed,
            "version": CHECKPOINT_VERSION,
        },
    )


def _load_affine(directory, name: str, cls):
    directory = Path(directory)
    meta = _read_json(directory / f"{name}.json")
    _check_version(meta, directory / f"{name}.json")
    d_model, input_dim = meta["d_model"], meta["input_dim"]
    weights, bias = _read_arrays(directory / f"{name}.bin", [(d_model, input_dim), (d_model,)])
    return cls(weights, bias)


def load_projection(directory) -> ProjectionModel:
    return _load_affine(directory, PROJECTION_NAME, ProjectionModel)


def load_distilled(directory) -> DistilledProjector:
    return _load_affine(directory, DISTILLED_NAME, DistilledProjector)


def generator_name(agent_id: int) -> str:
    return f"generator-{agent_id:02d}"


def save_generator(gen: InstructionGenerator, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = generator_name(gen.agent_id)
    _write_arrays(directory / f"{name}.bin", [gen.weights, gen.bias])
    _write_json(
        directory / f"{name}.json",
        {
            "d_model": gen.d_model,
            "n_tokens": gen.n_tokens,
            "agent_id": gen.agent_id,
            "seed": gen.seed,
            "version": CHECKPOINT_VERSION,
        },
    )


def load_generator(directory, agent_id: int) -> InstructionGenerator:
    directory = Path(directory)
    name = generator_name(agent_id)
    meta = _read_json(directory / f"{name}.json")
    _check_version(meta, directory / f"{name}.json")
    d_model, n_tokens = meta["d_model"], meta["n_tokens"]
    weights, bias = _read_arrays(
        directory / f"{name}.bin", [(d_model, 3 * d_model), (d_model, n_tokens)]
    )
    return InstructionGenerator(weights, bias, agent_id=meta["agent_id"], seed=meta["seed"])


def save_duals(duals: List[DualState], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = [
        {"agent_id": i, "alpha": d.alpha, "beta": d.beta, "alpha_max": d.alpha_max}
        for i, d in enumerate(duals)
    ]
    _write_json(directory / DUALS_NAME, payload)


def load_duals(directory) -> List[DualState]:
    payload = _read_json(Path(directory) / DUALS_NAME)
    ordered = sorted(payload, key=lambda item: item["agent_id"])
    return [DualState(alpha=item["alpha"], beta=item["beta"], alpha_max=item["alpha_max"]) for item in ordered]


def save_all(directory, projection, distilled, generators, duals, seed: int) -> None:
    save_affine(projection, directory, PROJECTION_NAME, seed)
    save_affine(distilled, directory, DISTILLED_NAME, seed)
    for gen in generators:
        save_generator(gen, directory)
    save_duals(duals, directory)
    logger.info("Wrote checkpoints for %d agents to %s", len(generators), directory)


def load_generators(directory, n_agents: int) -> List[InstructionGenerator]:
    return [load_generator(directory, i) for i in range(n_agents)]
