"""
Single-block attention activation and numerical checkers for its bounds.

The activation of a context C = [I ; X̄ ; P] is

    a(C) = W_V C softmax((W_K C)^T W_Q P / sqrt(d))

with queries built from the problem columns only. All norms are Frobenius.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from madctx.exceptions import DimensionError
from madctx.numerics import (
    as_matrix,
    concat_columns,
    frobenius_norm,
    least_squares_residual,
    padded_distance,
    softmax_columns,
    solve_least_squares,
)
from madctx.schemas import BoundReport

logger = logging.getLogger(__name__)

# Relative tolerance for the linear-attention decomposition equality.
DECOMPOSITION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AttentionBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    scale_dim: int

    def __post_init__(self):
        wq = as_matrix(self.wq, "wq").copy()
        wk = as_matrix(self.wk, "wk").copy()
        wv = as_matrix(self.wv, "wv").copy()
        d_model = wv.shape[0]
        if wv.shape != (d_model, d_model):
            raise DimensionError(f"wv must be square, got {wv.shape}")
        if wq.shape[1] != d_model or wk.shape[1] != d_model or wq.shape[0] != wk.shape[0]:
            raise DimensionError(
                f"wq {wq.shape} and wk {wk.shape} must both be d x {d_model}"
            )
        if self.scale_dim < 1:
            raise DimensionError("scale_dim must be positive")
        for arr in (wq, wk, wv):
            arr.setflags(write=False)
        object.__setattr__(self, "wq", wq)
        object.__setattr__(self, "wk", wk)
        object.__setattr__(self, "wv", wv)

    @property
    def d_model(self) -> int:
        return self.wv.shape[0]

    @classmethod
    def seeded(cls, d_model: int, scale_dim: int = 64, seed: int = 0) -> "AttentionBlock":
        """Gaussian weights scaled by 1/sqrt(d_model); identical for identical arguments."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d_model)
        return cls(
            wq=rng.standard_normal((scale_dim, d_model)) * scale,
            wk=rng.standard_normal((scale_dim, d_model)) * scale,
            wv=rng.standard_normal((d_model, d_model)) * scale,
            scale_dim=scale_dim,
        )


@dataclass(frozen=True)
class BoundConfig:
    l_a: float = 1.0
    l_v: float = 1.0
    rho: float = 0.5
    samples: int = 200

    def __post_init__(self):
        if min(self.l_a, self.l_v, self.rho) <= 0:
            raise ValueError("l_a, l_v and rho must be positive")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")


@dataclass(frozen=True)
class ContextBundle:
    """An agent's round context [I ; X̄ ; P]; `peers` is None when no responses exist yet."""

    instruction: np.ndarray
    peers: Optional[np.ndarray]
    problem: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return concat_columns([self.instruction, self.peers, self.problem])

    @property
    def width(self) -> int:
        peers = 0 if self.peers is None else self.peers.shape[1]
        return self.instruction.shape[1] + peers + self.problem.shape[1]

    def scaled(self, factor: float) -> "ContextBundle":
        return ContextBundle(
            instruction=self.instruction * factor,
            peers=None if self.peers is None else self.peers * factor,
            problem=self.problem * factor,
        )


def _check_rows(block: AttentionBlock, *parts: Optional[np.ndarray]) -> None:
    for part in parts:
        if part is not None and part.shape[0] != block.d_model:
            raise DimensionError(
                f"expected {block.d_model} rows, got {part.shape[0]}"
            )


def attention_scores(block: AttentionBlock, keys_values: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Unscaled scores (W_K C)^T W_Q Q, shape keys x queries."""
    return (block.wk @ keys_values).T @ (block.wq @ queries)


def attend(block: AttentionBlock, keys_values: np.ndarray, queries: np.ndarray) -> np.ndarray:
    _check_rows(block, keys_values, queries)
    weights = softmax_columns(attention_scores(block, keys_values, queries) / math.sqrt(block.scale_dim))
    return block.wv @ keys_values @ weights


def attend_linear(block: AttentionBlock, keys_values: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Linear attention: no softmax and no sqrt(d) scaling."""
    _check_rows(block, keys_values, queries)
    return block.wv @ keys_values @ attention_scores(block, keys_values, queries)


def attend_backward(
    block: AttentionBlock, keys_values: np.ndarray, queries: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of <upstream, attend(C, Q)> with respect to the key/value matrix C (Q held fixed)."""
    scale = math.sqrt(block.scale_dim)
    projected_queries = block.wq @ queries
    weights = softmax_columns((block.wk @ keys_values).T @ projected_queries / scale)
    values = block.wv @ keys_values

    d_values = upstream @ weights.T
    d_weights = values.T @ upstream
    d_scores = weights * (d_weights - np.sum(weights * d_weights, axis=0, keepdims=True))
    d_keys = projected_queries @ d_scores.T / scale
    return block.wv.T @ d_values + block.wk.T @ d_keys


def activation(
    block: AttentionBlock,
    instruction: np.ndarray,
    responses: Optional[np.ndarray],
    problem: np.ndarray,
) -> np.ndarray:
    """a([I ; X̄ ; P]); `responses` may be None for an initial context [I ; P]."""
    _check_rows(block, instruction, responses, problem)
    return attend(block, concat_columns([instruction, responses, problem]), problem)


def context_activation(block: AttentionBlock, bundle: ContextBundle) -> np.ndarray:
    return activation(block, bundle.instruction, bundle.peers, bundle.problem)


def linear_activation(block: AttentionBlock, content: Optional[np.ndarray], problem: np.ndarray) -> np.ndarray:
    """a'([Y ; P]) = W_V [Y,P] (W_K [Y,P])^T W_Q P; `content` None gives a'(P)."""
    _check_rows(block, content, problem)
    return attend_linear(block, concat_columns([content, problem]), problem)


def estimate_smoothness(
    block: AttentionBlock,
    n_cols: int,
    n_problem: int,
    pairs: int = 1000,
    seed: int = 0,
    inflation: float = 1.5,
) -> float:
    """
    Empirical smoothness constant of the activation map.

    Max ratio ||a(C1) - a(C2)|| / ||C1 - C2|| over seeded random context pairs, where
    the last `n_problem` columns of each context act as the queries. Perturbation
    sizes are log-uniform so both near and far pairs are covered.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        first = _unit_columns(rng, block.d_model, n_cols + n_problem)
        magnitude = 10.0 ** rng.uniform(-3.0, 0.0)
        second = first + magnitude * rng.standard_normal(first.shape)
        gap = frobenius_norm(first - second)
        if gap == 0.0:
            continue
        out_gap = frobenius_norm(
            attend(block, first, first[:, n_cols:]) - attend(block, second, second[:, n_cols:])
        )
        worst = max(worst, out_gap / gap)
    logger.debug("Estimated smoothness %.6f over %d pairs", worst, pairs)
    return inflation * worst


def _unit_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.standard_normal((rows, cols))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def operator_scale(
    block: AttentionBlock, contexts: Sequence[np.ndarray], queries: np.ndarray, cfg: BoundConfig
) -> float:
    """
    Common factor s <= 1 such that scaling every input by s gives ||W_V C|| <= L_V and
    ||(W_K C)^T W_Q Q|| <= rho^2 for each context C. Scores are quadratic in s.
    """
    factor = 1.0
    for context in contexts:
        value_norm = frobenius_norm(block.wv @ context)
        if value_norm > 0:
            factor = min(factor, cfg.l_v / value_norm)
        score_norm = frobenius_norm(attention_scores(block, context, queries))
        if score_norm > 0:
            factor = min(factor, math.sqrt(cfg.rho ** 2 / score_norm))
    return factor


def check_theorem1(
    block: AttentionBlock,
    contexts_t: Sequence[ContextBundle],
    contexts_b: Sequence[ContextBundle],
    a_c: np.ndarray,
    cfg: BoundConfig,
    seed: Optional[int] = None,
) -> BoundReport:
    """
    Evaluate both sides of the activation-difference bound:

        sum_i ||a_c - a(C_i^t)||
            <= sum_i ( sum_j ||a(C_i^t) - a(C_j^t)|| + (N+1) L_a ||C_i^t - C_i^b|| )
               + N min_w ||a_c - sum_i w_i a(C_i^b)||
    """
    if len(contexts_t) != len(contexts_b) or not contexts_t:
        raise DimensionError("contexts_t and contexts_b must be equal-length and non-empty")
    n_agents = len(contexts_t)
    acts_t = [context_activation(block, c) for c in contexts_t]
    acts_b = [context_activation(block, c) for c in contexts_b]
    if acts_t[0].shape != a_c.shape:
        raise DimensionError(f"a_c has shape {a_c.shape}, activations have {acts_t[0].shape}")

    lhs = sum(frobenius_norm(a_c - a) for a in acts_t)
    disagreement = sum(frobenius_norm(ai - aj) for ai in acts_t for aj in acts_t)
    drift = sum(padded_distance(ct.matrix, cb.matrix) for ct, cb in zip(contexts_t, contexts_b))
    basis = np.column_stack([a.ravel() for a in acts_b])
    target = a_c.ravel()
    fit = least_squares_residual(basis, target, solve_least_squares(basis, target, 0.0))
    rhs = disagreement + (n_agents + 1) * cfg.l_a * drift + n_agents * fit
    return BoundReport.evaluate("theorem1", lhs, rhs, seed)


def check_softmax_linear_gap(
    block: AttentionBlock, x: np.ndarray, cfg: BoundConfig, rescale: bool = True, seed: Optional[int] = None
) -> BoundReport:
    """||a(X) - a'(X)|| <= 3 L_V n exp(2 rho^2), self-attention form (queries from X)."""
    x = as_matrix(x, "x")
    if rescale:
        x = x * operator_scale(block, [x], x, cfg)
    n = x.shape[1]
    lhs = frobenius_norm(attend(block, x, x) - attend_linear(block, x, x))
    rhs = 3.0 * cfg.l_v * n * math.exp(2.0 * cfg.rho ** 2)
    return BoundReport.evaluate("softmax_linear_gap", lhs, rhs, seed)


def check_decoupling_bound(
    block: AttentionBlock,
    context_i: ContextBundle,
    context_j: ContextBundle,
    pair_i: Tuple[np.ndarray, np.ndarray],
    pair_j: Tuple[np.ndarray, np.ndarray],
    cfg: BoundConfig,
    n_agents: int,
    rescale: bool = True,
    seed: Optional[int] = None,
) -> BoundReport:
    """
    ||a(C_i) - a(C_j)|| <= ||a(I_i) - a(X_i)|| + ||a(I_j) - a(X_j)|| + 18 L_V n N exp(2 rho^2)

    where a(M) abbreviates a([M ; P]) and X_i is agent i's previous-round response.
    """
    problem = context_i.problem
    if rescale:
        mats = [context_i.matrix, context_j.matrix]
        mats += [concat_columns([m, problem]) for m in (*pair_i, *pair_j)]
        factor = operator_scale(block, mats, problem, cfg)
        context_i, context_j = context_i.scaled(factor), context_j.scaled(factor)
        pair_i = (pair_i[0] * factor, pair_i[1] * factor)
        pair_j = (pair_j[0] * factor, pair_j[1] * factor)
        problem = context_i.problem

    def shorthand(m: np.ndarray) -> np.ndarray:
        return activation(block, m, None, problem)

    lhs = frobenius_norm(context_activation(block, context_i) - context_activation(block, context_j))
    n = max(m.shape[1] for m in (*pair_i, *pair_j, problem))
    rhs = (
        frobenius_norm(shorthand(pair_i[0]) - shorthand(pair_i[1]))
        + frobenius_norm(shorthand(pair_j[0]) - shorthand(pair_j[1]))
        + 18.0 * cfg.l_v * n * n_agents * math.exp(2.0 * cfg.rho ** 2)
    )
    return BoundReport.evaluate("decoupling", lhs, rhs, seed)


def check_denominator_bound(scores: np.ndarray, rho: float, seed: Optional[int] = None) -> BoundReport:
    """sum_i exp(s_i) >= exp(-rho) whenever ||s||_2 <= rho."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(scores))
    if norm > rho * (1.0 + 1e-12):
        raise ValueError(f"scores norm {norm} exceeds rho {rho}")
    return BoundReport.evaluate("denominator", math.exp(-rho), float(np.sum(np.exp(scores))), seed)


def linear_decomposition_error(
    block: AttentionBlock, segments: Sequence[np.ndarray], problem: np.ndarray
) -> float:
    """Relative error of a'([Y_1..Y_N]) against sum_i a'(Y_i) - (N-1) a'(P)."""
    if not segments:
        raise DimensionError("at least one segment is required")
    whole = linear_activation(block, concat_columns(list(segments)), problem)
    parts = sum(linear_activation(block, s, problem) for s in segments)
    parts = parts - (len(segments) - 1) * linear_activation(block, None, problem)
    scale = max(frobenius_norm(whole), np.finfo(np.float64).tiny)
    return frobenius_norm(whole - parts) / scale


def check_linear_decomposition(
    block: AttentionBlock, segments: Sequence[np.ndarray], problem: np.ndarray, seed: Optional[int] = None
) -> BoundReport:
    error = linear_decomposition_error(block, segments, problem)
    return BoundReport.evaluate("linear_decomposition", error, DECOMPOSITION_TOLERANCE, seed)


def check_error_decomposition(
    block: AttentionBlock,
    segments: Sequence[np.ndarray],
    problem: np.ndarray,
    cfg: BoundConfig,
    rescale: bool = True,
    seed: Optional[int] = None,
) -> BoundReport:
    """||a(Y) - sum_i a(Y_i) + (N-1) a(P)|| <= 9 L_V n N exp(2 rho^2)."""
    segments = list(segments)
    if not segments:
        raise DimensionError("at least one segment is required")
    if rescale:
        mats = [concat_columns(segments + [problem])] + [concat_columns([s, problem]) for s in segments]
        mats.append(problem)
        factor = operator_scale(block, mats, problem, cfg)
        segments = [s * factor for s in segments]
        problem = problem * factor
    whole = activation(block, concat_columns(segments), None, problem)
    parts = sum(activation(block, s, None, problem) for s in segments)
    parts = parts - (len(segments) - 1) * attend(block, problem, problem)
    n = max(s.shape[1] for s in segments + [problem])
    lhs = frobenius_norm(whole - parts)
    rhs = 9.0 * cfg.l_v * n * len(segments) * math.exp(2.0 * cfg.rho ** 2)
    return BoundReport.evaluate("error_decomposition", lhs, rhs, seed)


def pairwise_max_squared(matrices: List[np.ndarray]) -> float:
    worst = 0.0
    for i in range(len(matrices)):
        for j in range(i + 1, len(matrices)):
            diff = matrices[i] - matrices[j]
            worst = max(worst, float(np.sum(diff * diff)))
    return worst
