"""
Instruction pool, latent projection models and initial-context selection.

Selection picks N pool instructions whose distilled images F([I ; P]) best
reconstruct the problem's sentence vector under least squares.
"""
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from madctx.attention import AttentionBlock, activation
from madctx.embedding import EmbeddingProvider
from madctx.exceptions import DimensionError, EmptyInputError, NonFiniteGradientError, PoolError
from madctx.numerics import concat_columns, least_squares_residual, solve_least_squares
from madctx.optim import build_optimizer
from madctx.schemas import PoolEntry, SelectionMode

logger = logging.getLogger(__name__)

# Largest pool for which exhaustive subset enumeration is allowed.
EXHAUSTIVE_LIMIT = 12


class ContextPool:
    """Immutable pool of instruction templates, held in id order."""

    def __init__(self, entries: Sequence[PoolEntry]):
        seen = set()
        for entry in entries:
            if entry.id in seen:
                raise PoolError(f"Duplicate pool id '{entry.id}'")
            seen.add(entry.id)
        self._entries: Tuple[PoolEntry, ...] = tuple(sorted(entries, key=lambda e: e.id))

    @property
    def entries(self) -> Tuple[PoolEntry, ...]:
        return self._entries

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self._entries]

    @property
    def texts(self) -> List[str]:
        return [e.text for e in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, ContextPool) and self._entries == other._entries

    def get(self, entry_id: str) -> PoolEntry:
        for entry in self._entries:
            if entry.id == entry_id:
                return entry
        raise PoolError(f"Unknown pool id '{entry_id}'")

    def first(self, n: int) -> List[PoolEntry]:
        if n > len(self._entries):
            raise PoolError(f"Pool has {len(self._entries)} entries, {n} requested")
        return list(self._entries[:n])


def dump_pool(pool: ContextPool) -> str:
    """Canonical text form: sorted by id, 2-space indent, trailing newline."""
    payload = [entry.model_dump() for entry in pool.entries]
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def save_pool(pool: ContextPool, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_pool(pool), encoding="utf-8")
    logger.info("Wrote pool of %d entries to %s", len(pool), path)


def load_pool(path) -> ContextPool:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PoolError(f"Malformed pool file {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise PoolError(f"Pool file {path} must hold a JSON array")
    try:
        entries = [PoolEntry(**item) for item in raw]
    except (TypeError, ValidationError) as exc:
        raise PoolError(f"Invalid pool entry in {path}: {exc}") from exc
    return ContextPool(entries)


@dataclass
class AffineModel:
    """y = W x + b on a flattened (row-major) input."""

    weights: np.ndarray
    bias: np.ndarray
    kind: str = "affine"

    @classmethod
    def zeros(cls, output_dim: int, input_dim: int, kind: str = "affine") -> "AffineModel":
        return cls(np.zeros((output_dim, input_dim)), np.zeros(output_dim), kind)

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).ravel()
        if flat.shape[0] != self.input_dim:
            raise DimensionError(f"{self.kind} expects {self.input_dim} inputs, got {flat.shape[0]}")
        return self.weights @ flat + self.bias

    def copy(self) -> "AffineModel":
        return type(self)(self.weights.copy(), self.bias.copy(), self.kind)


class ProjectionModel(AffineModel):
    """f: flattened activation a([A ; P]) to the sentence-vector space."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, kind: str = "projection"):
        super().__init__(weights, bias, kind)


class DistilledProjector(AffineModel):
    """F: flattened [I ; P] embedding to the sentence-vector space."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, kind: str = "distilled"):
        super().__init__(weights, bias, kind)


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]

    @property
    def improved(self) -> bool:
        return len(self.losses) > 1 and self.final < self.initial


def mean_norm_loss(model: AffineModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    residuals = targets - (inputs @ model.weights.T + model.bias)
    return float(np.mean(np.linalg.norm(residuals, axis=1)))


def norm_loss_gradients(
    model: AffineModel, inputs: np.ndarray, targets: np.ndarray
) -> Dict[str, np.ndarray]:
    """
    Gradient of mean_k ||t_k - (W x_k + b)|| w.r.t. W and b.

    Each sample contributes -u x^T and -u with u the unit residual; exact fits
    contribute nothing (subgradient 0).
    """
    residuals = targets - (inputs @ model.weights.T + model.bias)
    norms = np.linalg.norm(residuals, axis=1, keepdims=True)
    units = np.divide(residuals, norms, out=np.zeros_like(residuals), where=norms > 0)
    count = inputs.shape[0]
    return {"weights": -(units.T @ inputs) / count, "bias": -units.sum(axis=0) / count}


def fit_affine(
    model: AffineModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float,
    batch: int = 32,
    optimizer: str = "adam",
    seed: int = 0,
) -> Tuple[AffineModel, TrainingHistory]:
    """
    Minibatch descent on the mean residual norm; history holds the full-data loss per epoch.

    An epoch that ends with a higher full-data loss than the last kept one is undone:
    the parameters are restored, the step size halves and the optimizer restarts.
    The recorded history is therefore non-increasing.
    """
    if inputs.shape[0] == 0:
        raise EmptyInputError("training set is empty")
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    model = model.copy()
    params = {"weights": model.weights, "bias": model.bias}
    stepper = build_optimizer(optimizer, lr)
    rng = np.random.default_rng(seed)
    history = TrainingHistory([mean_norm_loss(model, inputs, targets)])
    for epoch in range(epochs):
        saved = {name: value.copy() for name, value in params.items()}
        order = rng.permutation(inputs.shape[0])
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            grads = norm_loss_gradients(model, inputs[idx], targets[idx])
            for name, grad in grads.items():
                bad = np.flatnonzero(~np.isfinite(grad))
                if bad.size:
                    raise NonFiniteGradientError(f"{model.kind}.{name}", int(bad[0]))
            if lr > 0:
                stepper.step(params, grads)
        loss = mean_norm_loss(model, inputs, targets)
        if loss > history.final:
            for name, value in saved.items():
                params[name][...] = value
            lr /= 2
            stepper = build_optimizer(optimizer, lr)
            logger.debug("%s epoch %d overshot (%.6f); step size now %.3g", model.kind, epoch + 1, loss, lr)
            loss = history.final
        history.losses.append(loss)
        logger.debug("%s epoch %d loss %.6f", model.kind, epoch + 1, loss)
    return model, history


def answer_activation(block: AttentionBlock, answer: np.ndarray, problem: np.ndarray) -> np.ndarray:
    return activation(block, answer, None, problem)


def train_projection(
    pairs: Sequence[Tuple[str, str]],
    block: AttentionBlock,
    provider: EmbeddingProvider,
    epochs: int = 100,
    lr: float = 1e-4,
    batch: int = 32,
    optimizer: str = "adam",
    seed: int = 0,
) -> Tuple[ProjectionModel, TrainingHistory]:
    """Fit f so that f(a([A ; P])) reproduces the problem's sentence vector v_P."""
    if not pairs:
        raise EmptyInputError("train_projection needs at least one (problem, answer) pair")
    inputs, targets = [], []
    for problem, answer in pairs:
        p = provider.embed_tokens(problem)
        inputs.append(answer_activation(block, provider.embed_tokens(answer), p).ravel())
        targets.append(provider.embed_sentence(problem))
    inputs, targets = np.stack(inputs), np.stack(targets)
    model = ProjectionModel(np.zeros((targets.shape[1], inputs.shape[1])), np.zeros(targets.shape[1]))
    trained, history = fit_affine(model, inputs, targets, epochs, lr, batch, optimizer, seed)
    logger.info("Projection loss %.6f -> %.6f over %d epochs", history.initial, history.final, epochs)
    return ProjectionModel(trained.weights, trained.bias), history


def distill_projector(
    pool: ContextPool,
    problems: Sequence[str],
    f: ProjectionModel,
    block: AttentionBlock,
    provider: EmbeddingProvider,
    epochs: int = 100,
    lr: float = 1e-4,
    batch: int = 32,
    optimizer: str = "adam",
    seed: int = 0,
) -> Tuple[DistilledProjector, TrainingHistory]:
    """
    Fit F([I ; P]) to f(a([I ; P])) over every (pool entry, problem) pair.

    The step size used is lr * min(1, mean target norm).
    """
    if not problems or len(pool) == 0:
        raise EmptyInputError("distill_projector needs a non-empty pool and problem list")
    inputs, targets = [], []
    for problem in problems:
        p = provider.embed_tokens(problem)
        for text in pool.texts:
            instruction = provider.embed_tokens(text)
            inputs.append(concat_columns([instruction, p]).ravel())
            targets.append(f(activation(block, instruction, None, p)))
    inputs, targets = np.stack(inputs), np.stack(targets)
    model = DistilledProjector(np.zeros((targets.shape[1], inputs.shape[1])), np.zeros(targets.shape[1]))
    scale = min(1.0, float(np.mean(np.linalg.norm(targets, axis=1))))
    trained, history = fit_affine(model, inputs, targets, epochs, lr * scale, batch, optimizer, seed)
    logger.info("Distillation loss %.6f -> %.6f over %d epochs", history.initial, history.final, epochs)
    return DistilledProjector(trained.weights, trained.bias), history


@dataclass(frozen=True)
class SelectionResult:
    chosen_ids: List[str]
    weights: np.ndarray
    residual: float


def _fit(images: np.ndarray, subset: Sequence[int], target: np.ndarray) -> Tuple[np.ndarray, float]:
    basis = images[:, list(subset)]
    weights = solve_least_squares(basis, target)
    return weights, least_squares_residual(basis, target, weights)


def select_from_images(
    images: np.ndarray,
    ids: Sequence[str],
    target: np.ndarray,
    n_agents: int,
    mode: SelectionMode = SelectionMode.GREEDY,
) -> SelectionResult:
    """
    Choose n_agents columns of `images` (one per id) minimizing the least-squares
    residual against `target`.

    Greedy adds, n_agents times, the column that most reduces the residual (ties by
    position). Exhaustive enumerates every subset; ties go to the lexicographically
    smallest sorted id tuple, which makes it independent of column order.
    """
    count = images.shape[1]
    if len(ids) != count:
        raise DimensionError(f"{len(ids)} ids for {count} images")
    if n_agents < 1:
        raise ValueError("n_agents must be at least 1")
    if n_agents > count:
        raise PoolError(f"Cannot select {n_agents} contexts from a pool of {count}")

    if SelectionMode(mode) == SelectionMode.EXHAUSTIVE:
        if count > EXHAUSTIVE_LIMIT:
            raise PoolError(f"Exhaustive selection is limited to pools of {EXHAUSTIVE_LIMIT}, got {count}")
        order = sorted(range(count), key=lambda i: ids[i])
        best: Optional[Tuple[float, Tuple[str, ...], Tuple[int, ...], np.ndarray]] = None
        for subset in itertools.combinations(order, n_agents):
            weights, residual = _fit(images, subset, target)
            key = tuple(ids[i] for i in subset)
            if best is None or residual < best[0] - 1e-12:
                best = (residual, key, subset, weights)
        residual, key, subset, weights = best
        return SelectionResult(list(key), weights, residual)

    chosen: List[int] = []
    weights, residual = np.zeros(0), float(np.linalg.norm(target))
    for _ in range(n_agents):
        step_best = None
        for i in range(count):
            if i in chosen:
                continue
            trial_weights, trial_residual = _fit(images, chosen + [i], target)
            if step_best is None or trial_residual < step_best[1] - 1e-12:
                step_best = (i, trial_residual, trial_weights)
        chosen.append(step_best[0])
        residual, weights = step_best[1], step_best[2]
    return SelectionResult([ids[i] for i in chosen], weights, residual)


def pool_images(
    pool: ContextPool, problem: np.ndarray, projector: DistilledProjector, provider: EmbeddingProvider
) -> np.ndarray:
    return np.column_stack(
        [projector(concat_columns([provider.embed_tokens(text), problem])) for text in pool.texts]
    )


def select_initial_contexts(
    pool: ContextPool,
    problem: str,
    projector: DistilledProjector,
    provider: EmbeddingProvider,
    n_agents: int,
    mode: SelectionMode = SelectionMode.GREEDY,
) -> SelectionResult:
    if n_agents > len(pool):
        raise PoolError(f"Cannot select {n_agents} contexts from a pool of {len(pool)}")
    images = pool_images(pool, provider.embed_tokens(problem), projector, provider)
    result = select_from_images(images, pool.ids, provider.embed_sentence(problem), n_agents, mode)
    logger.debug("Selected %s (residual %.6f)", result.chosen_ids, result.residual)
    return result


def fixed_contexts(pool: ContextPool, n_agents: int) -> List[PoolEntry]:
    """Baseline initialization: the first n_agents entries by id."""
    return pool.first(n_agents)
