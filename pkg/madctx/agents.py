"""
Agent backends: a deterministic consensus mock and a chat-completions HTTP client.
"""
import asyncio
import hashlib
import logging
from dataclasses import dataclass
from functools import wraps
from os import getenv
from typing import Dict, List, Optional, Protocol, Sequence

import httpx
import numpy as np
from dotenv import load_dotenv

from madctx.embedding import EmbeddingProvider
from madctx.exceptions import AgentTimeoutError, BackendError, ConfigurationError, DimensionError
from madctx.numerics import frobenius_norm
from madctx.schemas import AnswerCandidate, BackendKind, HttpAgentSpec, QAProblem, RunConfig

load_dotenv()

logger = logging.getLogger(__name__)

API_KEY_ENV = "M2CL_API_KEY"
MAX_DELAY = 60.0
RECOGNITION_THRESHOLD = 0.15
TRANSIENT_STATUSES = frozenset({408, 425, 429})


@dataclass(frozen=True)
class AgentRequest:
    """Everything an agent sees in one round of one discussion."""

    problem_key: str
    round_index: int
    agent: int
    system_text: str
    user_text: str
    instruction: np.ndarray
    peers: Optional[np.ndarray]
    problem: np.ndarray
    own_previous: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AgentResponse:
    text: str
    embedding: np.ndarray


class AgentBackend(Protocol):
    async def respond(self, request: AgentRequest) -> AgentResponse:
        ...


@dataclass(frozen=True)
class ConsensusMockSpec:
    gamma: float
    answer_table: Dict[str, List[AnswerCandidate]]
    noise: float = 0.0
    seed: int = 0
    recognition: float = RECOGNITION_THRESHOLD

    def __post_init__(self):
        if self.recognition <= 0:
            raise ValueError(f"recognition must be positive, got {self.recognition}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not self.answer_table or any(not c for c in self.answer_table.values()):
            raise ValueError("answer_table must map every problem to at least one candidate")


def answer_table_from(problems: Sequence[QAProblem]) -> Dict[str, List[AnswerCandidate]]:
    return {
        p.id: [AnswerCandidate(text=c, correct=c == p.answer) for c in p.candidates] for p in problems
    }


def _split_blocks(peers: Optional[np.ndarray], width: int) -> List[np.ndarray]:
    if peers is None:
        return []
    if peers.shape[1] % width:
        raise DimensionError(f"peer block width {peers.shape[1]} is not a multiple of {width}")
    return [peers[:, k : k + width] for k in range(0, peers.shape[1], width)]


def _noise_rng(seed: int, problem_key: str, round_index: int, agent: int) -> np.random.Generator:
    key = int.from_bytes(hashlib.blake2b(problem_key.encode("utf-8"), digest_size=8).digest(), "big")
    return np.random.default_rng([seed, key, round_index, agent])


def format_mock_response(answer: str) -> str:
    return f"Reasoning: weighed my previous view against the group's.\nAnswer: {answer}"


def problem_alignment(instruction: np.ndarray, problem: np.ndarray) -> float:
    """Cosine between the instruction and problem embeddings, both read as flat matrices."""
    if instruction.shape != problem.shape:
        raise DimensionError(f"instruction {instruction.shape} and problem {problem.shape} differ in shape")
    denom = frobenius_norm(instruction) * frobenius_norm(problem)
    if denom == 0:
        return 0.0
    return float(np.sum(instruction * problem) / denom)


def mock_respond(spec: ConsensusMockSpec, provider: EmbeddingProvider, request: AgentRequest) -> AgentResponse:
    """
    response = gamma * shared_mean + (1 - gamma) * self_belief + seeded noise.

    The self belief is the agent's own previous response, or its instruction in the
    first round. The shared mean averages the peer responses together with the
    agent's own previous one; with no peers it is the instruction.

    The answer is the correct candidate when the round's instruction aligns with the
    problem at least as much as ``spec.recognition``; otherwise it is the candidate
    whose token embedding lies nearest the response embedding.
    """
    if request.problem_key not in spec.answer_table:
        raise ConfigurationError(f"Unknown problem key '{request.problem_key}'")
    instruction = request.instruction
    width = instruction.shape[1]
    belief = request.own_previous if request.own_previous is not None else instruction
    blocks = _split_blocks(request.peers, width)
    if blocks:
        if request.own_previous is not None:
            blocks.append(request.own_previous)
        shared = np.mean(np.stack(blocks), axis=0)
    else:
        shared = instruction
    embedding = spec.gamma * shared + (1.0 - spec.gamma) * belief
    if spec.noise > 0:
        rng = _noise_rng(spec.seed, request.problem_key, request.round_index, request.agent)
        embedding = embedding + spec.noise * rng.standard_normal(embedding.shape)

    candidates = spec.answer_table[request.problem_key]
    correct = [c for c in candidates if c.correct]
    if correct and problem_alignment(instruction, request.problem) >= spec.recognition:
        choice = correct[0]
    else:
        distances = [frobenius_norm(provider.embed_tokens(c.text) - embedding) for c in candidates]
        choice = candidates[int(np.argmin(distances))]
    return AgentResponse(text=format_mock_response(choice.text), embedding=embedding)


class ConsensusMockAgent:
    def __init__(self, spec: ConsensusMockSpec, provider: EmbeddingProvider):
        self.spec = spec
        self.provider = provider

    async def respond(self, request: AgentRequest) -> AgentResponse:
        return mock_respond(self.spec, self.provider, request)


class TransientBackendError(BackendError):
    pass


def exponential_backoff_retry(max_retries: int = 3, base_delay: float = 1.0, max_delay: float = MAX_DELAY):
    """
    Retry transient failures with exponential backoff: max_retries + 1 attempts in total.

    The wait before retry k (0-based) is exactly min(base_delay * 2**k, max_delay).
    Timeouts are transport errors and are retried like any other transient failure.
    """

    def decorator(func):
        @wraps(func)
        async def wrapper(*args, **kwargs):
            last_exception = None

            for attempt in range(max_retries + 1):
                try:
                    return await func(*args, **kwargs)
                except (TransientBackendError, httpx.TransportError) as e:
                    last_exception = e

                    if attempt == max_retries:
                        break

                    delay = min(base_delay * (2 ** attempt), max_delay)
                    logger.warning(
                        "Agent call attempt %d failed: %s. Retrying in %.2f seconds...",
                        attempt + 1,
                        e,
                        delay,
                    )
                    await asyncio.sleep(delay)

            raise last_exception

        return wrapper

    return decorator


class HttpAgent:
    """Chat-completions client; embeds the assistant text with the pipeline's provider."""

    def __init__(
        self,
        spec: HttpAgentSpec,
        provider: EmbeddingProvider,
        api_key: Optional[str] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.spec = spec
        self.provider = provider
        self.api_key = api_key or getenv(API_KEY_ENV)
        if not self.api_key:
            raise ConfigurationError(f"{API_KEY_ENV} is not set; the http backend needs credentials")
        self.transport = transport

    @property
    def url(self) -> str:
        return self.spec.endpoint_url.rstrip("/") + "/chat/completions"

    def payload(self, request: AgentRequest) -> dict:
        return {
            "model": self.spec.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": self.spec.temperature,
        }

    async def _post(self, body: dict) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        async with httpx.AsyncClient(timeout=self.spec.timeout, transport=self.transport) as client:
            response = await client.post(self.url, headers=headers, json=body)
        if response.status_code in TRANSIENT_STATUSES or response.status_code >= 500:
            raise TransientBackendError(
                f"Chat request failed ({response.status_code})",
                status=response.status_code,
                body=response.text[:200],
            )
        if response.status_code >= 400:
            raise BackendError(
                f"Chat request rejected ({response.status_code})",
                status=response.status_code,
                body=response.text[:200],
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"Malformed chat response: {exc}", body=response.text[:200]) from exc

    async def respond(self, request: AgentRequest) -> AgentResponse:
        call = exponential_backoff_retry(self.spec.max_retries, self.spec.backoff_base)(self._post)
        try:
            text = await call(self.payload(request))
        except httpx.TimeoutException as exc:
            raise AgentTimeoutError(f"Chat request timed out after {self.spec.timeout}s") from exc
        except TransientBackendError as exc:
            raise BackendError(str(exc), status=exc.status, body=exc.body) from exc
        except httpx.TransportError as exc:
            raise BackendError(f"Chat transport failed: {exc}") from exc
        return AgentResponse(text=text, embedding=self.provider.embed_tokens(text))


def build_agents(
    config: RunConfig, provider: EmbeddingProvider, problems: Sequence[QAProblem]
) -> List[AgentBackend]:
    if config.backend == BackendKind.HTTP:
        spec = config.http_agent_spec()
        return [HttpAgent(spec, provider) for _ in range(config.n_agents)]
    spec = ConsensusMockSpec(
        gamma=config.gamma,
        answer_table=answer_table_from(problems),
        noise=config.noise,
        seed=config.seed,
        recognition=config.recognition,
    )
    agent = ConsensusMockAgent(spec, provider)
    return [agent] * config.n_agents
