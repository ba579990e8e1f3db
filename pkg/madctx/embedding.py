"""
Text to embedding-matrix maps.

The default provider feature-hashes whitespace tokens to seeded unit vectors so
the whole pipeline runs without an external model. A remote provider speaking
the common embeddings wire shape is available for live runs.
"""
import hashlib
import logging
from functools import lru_cache
from os import getenv
from typing import Callable, Dict, List, NamedTuple, Optional, Protocol, Sequence

import httpx
import numpy as np
from dotenv import load_dotenv

from madctx.exceptions import BackendError, EmptyInputError
from madctx.schemas import EmbedderSpec

load_dotenv()

logger = logging.getLogger(__name__)


class EmbeddingProvider(Protocol):
    spec: EmbedderSpec

    def embed_tokens(self, text: str) -> np.ndarray:
        ...

    def embed_sentence(self, text: str) -> np.ndarray:
        ...

    def embed_token_summary(self, text: str) -> np.ndarray:
        ...


class RankedText(NamedTuple):
    index: int
    text: str
    score: float


def tokenize(text: str) -> List[str]:
    tokens = text.split()
    if not tokens:
        raise EmptyInputError("text is empty after whitespace normalization")
    return tokens


@lru_cache(maxsize=65536)
def _token_vector(seed: int, d_model: int, token: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{token}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    vec = rng.standard_normal(d_model)
    vec /= np.linalg.norm(vec)
    vec.setflags(write=False)
    return vec


def cycle_tokens(tokens: Sequence[str], n_tokens: int) -> List[str]:
    """Truncate or cyclically repeat to exactly n_tokens."""
    return [tokens[i % len(tokens)] for i in range(n_tokens)]


def hash_embed_tokens(spec: EmbedderSpec, text: str) -> np.ndarray:
    """d_model x n_tokens matrix of unit columns, one seeded hash vector per token position."""
    tokens = cycle_tokens(tokenize(text), spec.n_tokens)
    return np.column_stack([_token_vector(spec.seed, spec.d_model, tok) for tok in tokens])


def hash_embed_sentence(spec: EmbedderSpec, text: str) -> np.ndarray:
    """Renormalized mean over every token of the text (no padding, order-free)."""
    # summed in sorted order so permutations agree bit for bit
    vectors = [_token_vector(spec.seed, spec.d_model, tok) for tok in sorted(tokenize(text))]
    return _renormalized_mean(np.column_stack(vectors))


def _renormalized_mean(columns: np.ndarray) -> np.ndarray:
    mean = columns.mean(axis=1)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        return columns[:, 0].copy()
    return mean / norm


def sentence_of(embedding: np.ndarray) -> np.ndarray:
    """Sentence vector of an embedding matrix: the renormalized column mean."""
    return _renormalized_mean(embedding)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class HashEmbeddingProvider:
    """Memoizes per text; returned arrays are read-only."""

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        self._tokens: Dict[str, np.ndarray] = {}
        self._sentences: Dict[str, np.ndarray] = {}
        self._summaries: Dict[str, np.ndarray] = {}

    def embed_tokens(self, text: str) -> np.ndarray:
        if text not in self._tokens:
            self._tokens[text] = _frozen(hash_embed_tokens(self.spec, text))
        return self._tokens[text]

    def embed_sentence(self, text: str) -> np.ndarray:
        if text not in self._sentences:
            self._sentences[text] = _frozen(hash_embed_sentence(self.spec, text))
        return self._sentences[text]

    def embed_token_summary(self, text: str) -> np.ndarray:
        """Sentence vector of the token matrix: what sentence_of gives for embed_tokens(text)."""
        if text not in self._summaries:
            self._summaries[text] = _frozen(sentence_of(self.embed_tokens(text)))
        return self._summaries[text]


def project_embedding(values: Sequence[float], d_model: int) -> np.ndarray:
    """Fold (or zero-extend) a provider vector to d_model entries, then renormalize."""
    raw = np.asarray(values, dtype=np.float64)
    projected = np.zeros(d_model)
    if raw.shape[0] <= d_model:
        projected[: raw.shape[0]] = raw
    else:
        np.add.at(projected, np.arange(raw.shape[0]) % d_model, raw)
    norm = np.linalg.norm(projected)
    if norm == 0.0:
        raise BackendError("embedding provider returned a zero vector")
    return projected / norm


class RemoteEmbeddingProvider:
    """
    POST {url} with {"model", "input": [text, ...]}; reads data[k].embedding.

    Token embeddings embed each token position separately in one batched call.
    """

    def __init__(
        self,
        spec: EmbedderSpec,
        url: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.spec = spec
        self.url = url
        self.model = model
        self.api_key = api_key or getenv("M2CL_EMBEDDINGS_API_KEY") or getenv("M2CL_API_KEY")
        self.client = httpx.Client(timeout=timeout, transport=transport)
        self._cache: dict = {}

    def _embed_batch(self, inputs: List[str]) -> List[np.ndarray]:
        missing = [text for text in dict.fromkeys(inputs) if text not in self._cache]
        if missing:
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            response = self.client.post(self.url, headers=headers, json={"model": self.model, "input": missing})
            if response.status_code >= 400:
                raise BackendError(
                    f"Embedding request failed ({response.status_code})",
                    status=response.status_code,
                    body=response.text[:200],
                )
            try:
                data = response.json()["data"]
                for text, item in zip(missing, data):
                    self._cache[text] = project_embedding(item["embedding"], self.spec.d_model)
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(f"Malformed embedding response: {exc}", body=response.text[:200]) from exc
        return [self._cache[text] for text in inputs]

    def embed_tokens(self, text: str) -> np.ndarray:
        tokens = cycle_tokens(tokenize(text), self.spec.n_tokens)
        return np.column_stack(self._embed_batch(tokens))

    def embed_sentence(self, text: str) -> np.ndarray:
        tokenize(text)
        return self._embed_batch([text])[0]

    def embed_token_summary(self, text: str) -> np.ndarray:
        return sentence_of(self.embed_tokens(text))


def nearest_texts(
    provider: EmbeddingProvider,
    query: np.ndarray,
    candidates: Sequence[str],
    k: int,
    represent: Optional[Callable[[str], np.ndarray]] = None,
) -> List[RankedText]:
    """
    Top-k candidates by cosine of their vectors to `query`; ties by index.

    Candidates are represented by `provider.embed_sentence` unless `represent` is given.
    """
    represent = represent or provider.embed_sentence
    if not candidates:
        raise EmptyInputError("candidate list is empty")
    if k < 1 or k > len(candidates):
        raise ValueError(f"k must be in [1, {len(candidates)}], got {k}")
    query = np.asarray(query, dtype=np.float64)
    query_norm = np.linalg.norm(query)
    if query_norm == 0.0:
        raise EmptyInputError("query vector is zero")
    sentences = np.column_stack([represent(text) for text in candidates])
    scores = (query @ sentences) / (query_norm * np.linalg.norm(sentences, axis=0))
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [RankedText(i, candidates[i], float(scores[i])) for i in order[:k]]


def build_provider(
    spec: EmbedderSpec, endpoint: Optional[str] = None, model: str = ""
) -> EmbeddingProvider:
    if endpoint:
        logger.info("Using remote embeddings at %s", endpoint)
        return RemoteEmbeddingProvider(spec, endpoint, model)
    return HashEmbeddingProvider(spec)
