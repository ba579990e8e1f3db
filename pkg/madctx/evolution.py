"""
Per-agent instruction generators and the alternating primal/dual update.

An agent's instruction for the next round is produced by an affine generator from
the problem, its initial instruction and a summary of its peers' responses:

    I = W [P ; I_b ; mean(X̄)] + B

Training minimizes ||a([I ; P]) - a([X ; P])|| + alpha ||I - I_b|| over (W, B) while
alpha follows projected dual ascent on the budget ||I - I_b|| <= beta.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from madctx.attention import AttentionBlock, activation, attend_backward
from madctx.embedding import EmbeddingProvider, nearest_texts, sentence_of
from madctx.exceptions import DimensionError, EmptyInputError, NonFiniteGradientError
from madctx.numerics import as_matrix, concat_columns, frobenius_norm
from madctx.schemas import EvolveReport

logger = logging.getLogger(__name__)

PREAMBLE_VERSION = 1
COLLABORATION_PREAMBLE = (
    "You are one of several agents discussing the same problem.\n"
    "- Read the other agents' latest answers before you respond.\n"
    "- Keep reasoning steps that agree with the evidence and drop the rest.\n"
    "- Name any disagreement explicitly and resolve it.\n"
    "- Finish with a single line of the form 'Answer: <answer>'."
)

# Scale of the seeded perturbation added to the identity-on-I_b initialization.
INIT_NOISE = 1e-3


class InstructionGenerator:
    def __init__(self, weights: np.ndarray, bias: np.ndarray, agent_id: int = 0, seed: int = 0):
        weights = as_matrix(weights, "generator weights").copy()
        bias = as_matrix(bias, "generator bias").copy()
        d_model = weights.shape[0]
        if weights.shape[1] != 3 * d_model or bias.shape[0] != d_model:
            raise DimensionError(
                f"generator weights must be d x 3d and bias d x n, got {weights.shape} and {bias.shape}"
            )
        self.weights = weights
        self.bias = bias
        self.agent_id = agent_id
        self.seed = seed

    @classmethod
    def initial(
        cls, d_model: int, n_tokens: int, agent_id: int = 0, seed: int = 0, problem_mix: float = 0.0
    ) -> "InstructionGenerator":
        """W = [mix Id | Id | 0] plus small seeded noise, B = 0; output starts near I_b + mix P."""
        if problem_mix < 0:
            raise ValueError("problem_mix must be nonnegative")
        rng = np.random.default_rng([seed, agent_id])
        weights = np.zeros((d_model, 3 * d_model))
        weights[:, :d_model] = problem_mix * np.eye(d_model)
        weights[:, d_model : 2 * d_model] = np.eye(d_model)
        weights += INIT_NOISE * rng.standard_normal(weights.shape)
        return cls(weights, np.zeros((d_model, n_tokens)), agent_id=agent_id, seed=seed)

    @property
    def d_model(self) -> int:
        return self.weights.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.bias.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def copy(self) -> "InstructionGenerator":
        return InstructionGenerator(self.weights, self.bias, self.agent_id, self.seed)


@dataclass
class DualState:
    alpha: float = 0.0
    beta: float = 1.0
    alpha_max: float = 100.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be positive")
        if not 0.0 <= self.alpha <= self.alpha_max:
            raise ValueError(f"alpha must lie in [0, {self.alpha_max}], got {self.alpha}")

    def ascend(self, violation: float, lr_alpha: float) -> float:
        self.alpha = float(min(max(self.alpha + lr_alpha * violation, 0.0), self.alpha_max))
        return self.alpha


def peer_summary(peer_responses: Optional[np.ndarray], d_model: int, n_tokens: int) -> np.ndarray:
    """Mean of the n_tokens-wide peer blocks in a column concatenation; zeros without peers."""
    if peer_responses is None:
        return np.zeros((d_model, n_tokens))
    peers = as_matrix(peer_responses, "peer_responses")
    if peers.shape[0] != d_model or peers.shape[1] % n_tokens:
        raise DimensionError(f"peer block {peers.shape} is not a concatenation of {d_model} x {n_tokens} responses")
    return peers.reshape(d_model, -1, n_tokens).mean(axis=1)


def generator_input(
    gen: InstructionGenerator,
    problem: np.ndarray,
    init_instruction: np.ndarray,
    peer_responses: Optional[np.ndarray],
) -> np.ndarray:
    expected = (gen.d_model, gen.n_tokens)
    for name, part in (("problem", problem), ("init_instruction", init_instruction)):
        if part.shape != expected:
            raise DimensionError(f"{name} must be {expected}, got {part.shape}")
    summary = peer_summary(peer_responses, gen.d_model, gen.n_tokens)
    return np.vstack([problem, init_instruction, summary])


def generate_instruction(
    gen: InstructionGenerator,
    problem: np.ndarray,
    init_instruction: np.ndarray,
    peer_responses: Optional[np.ndarray],
) -> np.ndarray:
    return gen.weights @ generator_input(gen, problem, init_instruction, peer_responses) + gen.bias


def _alignment(block: AttentionBlock, instruction: np.ndarray, target: np.ndarray, problem: np.ndarray) -> np.ndarray:
    return activation(block, instruction, None, problem) - activation(block, target, None, problem)


def generator_loss(
    block: AttentionBlock,
    gen: InstructionGenerator,
    problem: np.ndarray,
    init_instruction: np.ndarray,
    prev_own_response: np.ndarray,
    peer_responses: Optional[np.ndarray],
    alpha: float,
) -> float:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    instruction = generate_instruction(gen, problem, init_instruction, peer_responses)
    align = frobenius_norm(_alignment(block, instruction, prev_own_response, problem))
    return align + alpha * frobenius_norm(instruction - init_instruction)


def generator_gradients(
    block: AttentionBlock,
    gen: InstructionGenerator,
    problem: np.ndarray,
    init_instruction: np.ndarray,
    prev_own_response: np.ndarray,
    peer_responses: Optional[np.ndarray],
    alpha: float,
) -> Dict[str, np.ndarray]:
    """Analytic gradient of generator_loss w.r.t. weights and bias; zero norms contribute 0."""
    z = generator_input(gen, problem, init_instruction, peer_responses)
    instruction = gen.weights @ z + gen.bias
    width = instruction.shape[1]

    gap = _alignment(block, instruction, prev_own_response, problem)
    gap_norm = frobenius_norm(gap)
    d_instruction = np.zeros_like(instruction)
    if gap_norm > 0:
        context = concat_columns([instruction, problem])
        d_instruction += attend_backward(block, context, problem, gap / gap_norm)[:, :width]

    drift = instruction - init_instruction
    drift_norm = frobenius_norm(drift)
    if alpha > 0 and drift_norm > 0:
        d_instruction += alpha * drift / drift_norm
    return {"weights": d_instruction @ z.T, "bias": d_instruction}


def evolve_step(
    gen: InstructionGenerator,
    dual: DualState,
    block: AttentionBlock,
    problem: np.ndarray,
    init_instruction: np.ndarray,
    prev_own_response: np.ndarray,
    peer_responses: Optional[np.ndarray],
    lr_theta: float = 1e-4,
    lr_alpha: float = 1e-4,
    tune_alpha: bool = True,
) -> EvolveReport:
    """
    One alternating update: a gradient step on (W, B) at the current alpha, then
    alpha <- clamp(alpha + lr_alpha * (||I - I_b|| - beta), 0, alpha_max) using the
    updated generator. With tune_alpha off alpha keeps its value. The generator is
    left untouched if any gradient is non-finite.
    """
    if lr_theta <= 0 or lr_alpha <= 0:
        raise ValueError("lr_theta and lr_alpha must be positive")
    grads = generator_gradients(
        block, gen, problem, init_instruction, prev_own_response, peer_responses, dual.alpha
    )
    for name, grad in grads.items():
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise NonFiniteGradientError(f"generator[{gen.agent_id}].{name}", int(bad[0]))
    gen.weights -= lr_theta * grads["weights"]
    gen.bias -= lr_theta * grads["bias"]

    instruction = generate_instruction(gen, problem, init_instruction, peer_responses)
    violation = frobenius_norm(instruction - init_instruction) - dual.beta
    if tune_alpha:
        dual.ascend(violation, lr_alpha)
    loss = generator_loss(
        block, gen, problem, init_instruction, prev_own_response, peer_responses, dual.alpha
    )
    logger.debug("agent %d: loss %.6f violation %.6f alpha %.6f", gen.agent_id, loss, violation, dual.alpha)
    return EvolveReport(generator_loss=loss, constraint_violation=violation, alpha_after=dual.alpha)


def decode_instruction(
    embedding: np.ndarray, templates, provider: EmbeddingProvider, k: int = 1
) -> str:
    """
    Render an instruction embedding as text: the collaboration preamble followed by
    the nearest pool template, plus k-1 further templates as extra perspectives.
    `templates` is a ContextPool or a list of template strings.

    Templates are ranked by the column mean of their token matrices, the same
    summary taken of the embedding, so a template's own matrix decodes to itself.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    texts = list(getattr(templates, "texts", templates))
    if not texts:
        raise EmptyInputError("cannot decode against an empty pool")
    ranked = nearest_texts(
        provider, sentence_of(embedding), texts, min(k, len(texts)), represent=provider.embed_token_summary
    )
    parts = [COLLABORATION_PREAMBLE, ranked[0].text]
    if len(ranked) > 1:
        parts.append("Additional perspectives:\n" + "\n".join(f"- {r.text}" for r in ranked[1:]))
    return "\n\n".join(parts)
