"""
Seeded randomized sweeps over every attention bound checker.

Each sample draws a fresh instance from default_rng(seed + k) and yields one
BoundReport per check, tagged with that per-sample seed.

With rescaling off the sweep is a negative control: samples for the rescaled
checks get columns of norm d_model, far outside the operator bounds.
"""
import logging
from typing import Iterator, List, Optional

import numpy as np

from madctx.attention import (
    AttentionBlock,
    BoundConfig,
    ContextBundle,
    check_decoupling_bound,
    check_denominator_bound,
    check_error_decomposition,
    check_linear_decomposition,
    check_softmax_linear_gap,
    check_theorem1,
    context_activation,
    estimate_smoothness,
)
from madctx.exceptions import VerificationError
from madctx.schemas import BoundReport

logger = logging.getLogger(__name__)

CHECKS = (
    "theorem1",
    "decoupling",
    "softmax_linear_gap",
    "denominator",
    "linear_decomposition",
    "error_decomposition",
)
MAX_SEGMENTS = 5


def _unit(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.standard_normal((rows, cols))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def _magnitude(block: AttentionBlock, rescale: bool) -> float:
    return 1.0 if rescale else float(block.d_model)


def _theorem1_sample(block: AttentionBlock, cfg: BoundConfig, n_tokens: int, seed: int) -> BoundReport:
    rng = np.random.default_rng(seed)
    d = block.d_model
    n_agents = int(rng.integers(2, 5))
    problem = _unit(rng, d, n_tokens)
    init = [_unit(rng, d, n_tokens) for _ in range(n_agents)]
    responses = [_unit(rng, d, n_tokens) for _ in range(n_agents)]
    current = [init[i] + 0.1 * rng.standard_normal((d, n_tokens)) for i in range(n_agents)]
    contexts_b = [ContextBundle(init[i], None, problem) for i in range(n_agents)]
    contexts_t = [
        ContextBundle(current[i], np.hstack([r for j, r in enumerate(responses) if j != i]), problem)
        for i in range(n_agents)
    ]
    # target drawn from the convex hull of the round's activations
    weights = rng.dirichlet(np.ones(n_agents))
    a_c = sum(w * context_activation(block, c) for w, c in zip(weights, contexts_t))
    return check_theorem1(block, contexts_t, contexts_b, a_c, cfg, seed)


def _decoupling_sample(block: AttentionBlock, cfg: BoundConfig, n_tokens: int, rescale: bool, seed: int) -> BoundReport:
    rng = np.random.default_rng(seed)
    d = block.d_model
    n_agents = int(rng.integers(2, 5))
    c = _magnitude(block, rescale)
    problem = c * _unit(rng, d, n_tokens)
    instructions = [c * _unit(rng, d, n_tokens) for _ in range(n_agents)]
    previous = [c * _unit(rng, d, n_tokens) for _ in range(n_agents)]

    def bundle(i: int) -> ContextBundle:
        peers = np.hstack([x for j, x in enumerate(previous) if j != i])
        return ContextBundle(instructions[i], peers, problem)

    return check_decoupling_bound(
        block,
        bundle(0),
        bundle(1),
        (instructions[0], previous[0]),
        (instructions[1], previous[1]),
        cfg,
        n_agents,
        rescale=rescale,
        seed=seed,
    )


def _softmax_gap_sample(block: AttentionBlock, cfg: BoundConfig, rescale: bool, seed: int) -> BoundReport:
    rng = np.random.default_rng(seed)
    x = _magnitude(block, rescale) * _unit(rng, block.d_model, int(rng.integers(1, 5)))
    return check_softmax_linear_gap(block, x, cfg, rescale=rescale, seed=seed)


def _denominator_sample(cfg: BoundConfig, seed: int) -> BoundReport:
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(int(rng.integers(1, 9)))
    scores = direction / np.linalg.norm(direction) * cfg.rho * rng.uniform()
    return check_denominator_bound(scores, cfg.rho, seed)


def _segments(rng: np.random.Generator, d: int, count: int, n_tokens: int) -> List[np.ndarray]:
    return [_unit(rng, d, n_tokens) for _ in range(count)]


def _linear_decomposition_sample(block: AttentionBlock, n_tokens: int, k: int, seed: int) -> BoundReport:
    rng = np.random.default_rng(seed)
    count = k % MAX_SEGMENTS + 1
    problem = _unit(rng, block.d_model, n_tokens)
    return check_linear_decomposition(block, _segments(rng, block.d_model, count, n_tokens), problem, seed)


def _error_decomposition_sample(
    block: AttentionBlock, cfg: BoundConfig, n_tokens: int, k: int, rescale: bool, seed: int
) -> BoundReport:
    rng = np.random.default_rng(seed)
    count = k % MAX_SEGMENTS + 1
    c = _magnitude(block, rescale)
    problem = c * _unit(rng, block.d_model, n_tokens)
    segments = [c * s for s in _segments(rng, block.d_model, count, n_tokens)]
    return check_error_decomposition(block, segments, problem, cfg, rescale=rescale, seed=seed)


def run_verification(
    block: AttentionBlock,
    seed: int = 0,
    samples: int = 200,
    n_tokens: int = 2,
    rescale: bool = True,
    cfg: Optional[BoundConfig] = None,
) -> Iterator[BoundReport]:
    """
    Yield reports sample by sample, every check per sample. Unless `cfg` is given,
    L_a is the empirical smoothness estimate of `block` for contexts of this width.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    if cfg is None:
        l_a = estimate_smoothness(block, n_cols=2 * n_tokens, n_problem=n_tokens, seed=seed)
        cfg = BoundConfig(l_a=l_a, samples=samples)
    logger.info("Verifying bounds: %d samples, L_a %.4f, rescale=%s", samples, cfg.l_a, rescale)
    for k in range(samples):
        sample_seed = seed + k
        yield _theorem1_sample(block, cfg, n_tokens, sample_seed)
        yield _decoupling_sample(block, cfg, n_tokens, rescale, sample_seed)
        yield _softmax_gap_sample(block, cfg, rescale, sample_seed)
        yield _denominator_sample(cfg, sample_seed)
        yield _linear_decomposition_sample(block, n_tokens, k, sample_seed)
        yield _error_decomposition_sample(block, cfg, n_tokens, k, rescale, sample_seed)


def first_violation(reports: List[BoundReport]) -> Optional[BoundReport]:
    return next((r for r in reports if not r.holds), None)


def require_all_hold(reports: List[BoundReport]) -> None:
    violated = first_violation(reports)
    if violated is not None:
        logger.error("Bound %s violated at seed %s (slack %.3e)", violated.check, violated.seed, violated.slack)
        raise VerificationError(f"Bound '{violated.check}' violated at seed {violated.seed}")
