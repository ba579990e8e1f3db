import json

import httpx
import numpy as np
import pytest

from madctx.embedding import (
    HashEmbeddingProvider,
    RemoteEmbeddingProvider,
    hash_embed_sentence,
    hash_embed_tokens,
    nearest_texts,
    sentence_of,
)
from madctx.exceptions import BackendError, EmptyInputError
from madctx.schemas import EmbedderSpec


def test_token_embedding_shape_and_unit_columns(spec):
    m = hash_embed_tokens(spec, "one two three four five six")
    assert m.shape == (16, 4)
    np.testing.assert_allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-9)


def test_token_embedding_is_deterministic(spec):
    np.testing.assert_array_equal(hash_embed_tokens(spec, "a b c"), hash_embed_tokens(spec, "a b c"))


def test_one_token_change_touches_only_its_column(spec):
    first = hash_embed_tokens(spec, "a b c d")
    second = hash_embed_tokens(spec, "a x c d")
    changed = [j for j in range(4) if not np.array_equal(first[:, j], second[:, j])]
    assert changed == [1]


def test_short_text_is_padded_cyclically(spec):
    m = hash_embed_tokens(spec, "left right")
    np.testing.assert_array_equal(m[:, 0], m[:, 2])
    np.testing.assert_array_equal(m[:, 1], m[:, 3])


def test_seed_changes_embeddings():
    a = hash_embed_tokens(EmbedderSpec(d_model=16, n_tokens=2, seed=0), "token")
    b = hash_embed_tokens(EmbedderSpec(d_model=16, n_tokens=2, seed=1), "token")
    assert not np.array_equal(a, b)


def test_distinct_tokens_are_nearly_orthogonal():
    spec = EmbedderSpec(d_model=512, n_tokens=1, seed=0)
    rng = np.random.default_rng(0)
    cosines = []
    for _ in range(1000):
        i, j = rng.choice(100000, size=2, replace=False)
        u = hash_embed_tokens(spec, f"tok{i}")[:, 0]
        v = hash_embed_tokens(spec, f"tok{j}")[:, 0]
        cosines.append(abs(u @ v))
    assert np.mean(cosines) <= 0.15


def test_empty_text_is_rejected(spec):
    with pytest.raises(EmptyInputError):
        hash_embed_tokens(spec, "   \n\t")
    with pytest.raises(EmptyInputError):
        hash_embed_sentence(spec, "")


def test_single_token_sentence_is_that_token(spec):
    np.testing.assert_allclose(hash_embed_sentence(spec, "solo"), hash_embed_tokens(spec, "solo")[:, 0])


def test_sentence_is_order_free(spec):
    np.testing.assert_array_equal(
        hash_embed_sentence(spec, "red green blue"), hash_embed_sentence(spec, "blue red green")
    )


def test_sentence_equals_renormalized_mean_of_all_tokens(spec):
    text = "one two three four five six seven"
    columns = np.column_stack([hash_embed_tokens(EmbedderSpec(d_model=16, n_tokens=1, seed=0), t)[:, 0] for t in text.split()])
    mean = columns.mean(axis=1)
    np.testing.assert_allclose(hash_embed_sentence(spec, text), mean / np.linalg.norm(mean), atol=1e-12)


def test_nearest_texts_self_retrieval(provider):
    candidates = [f"word{i} other{i}" for i in range(10)]
    ranked = nearest_texts(provider, provider.embed_sentence(candidates[6]), candidates, 1)
    assert ranked[0].index == 6
    assert ranked[0].score == pytest.approx(1.0)


def test_nearest_texts_full_ranking_matches_cosine_sort(provider, rng):
    candidates = [f"c{i} d{i % 3}" for i in range(20)]
    query = rng.standard_normal(16)
    ranked = nearest_texts(provider, query, candidates, len(candidates))
    sentences = np.column_stack([provider.embed_sentence(c) for c in candidates])
    cosines = query @ sentences / np.linalg.norm(query)
    expected = sorted(range(20), key=lambda i: (-cosines[i], i))
    assert [r.index for r in ranked] == expected


def test_nearest_texts_breaks_ties_by_index(provider):
    ranked = nearest_texts(provider, provider.embed_sentence("same"), ["same", "other", "same"], 3)
    assert [r.index for r in ranked][:2] == [0, 2]


def test_nearest_texts_rejects_empty_candidates(provider):
    with pytest.raises(EmptyInputError):
        nearest_texts(provider, np.ones(16), [], 1)


def test_nearest_texts_rejects_oversized_k(provider):
    with pytest.raises(ValueError):
        nearest_texts(provider, np.ones(16), ["a"], 2)


def test_sentence_of_renormalizes_column_mean():
    m = np.array([[1.0, 1.0], [0.0, 2.0]])
    np.testing.assert_allclose(sentence_of(m), np.array([1.0, 1.0]) / np.sqrt(2))


def test_hash_provider_delegates(spec, provider):
    np.testing.assert_array_equal(provider.embed_tokens("x y"), hash_embed_tokens(spec, "x y"))


def test_remote_provider_folds_vectors_to_d_model(spec):
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body)
        data = [{"embedding": [float(k + len(text)) for k in range(20)]} for text in body["input"]]
        return httpx.Response(200, json={"data": data})

    provider = RemoteEmbeddingProvider(spec, "http://embed.test/v1/embeddings", "emb-model", api_key="k", transport=httpx.MockTransport(handler))
    m = provider.embed_tokens("alpha beta")
    assert m.shape == (16, 4)
    np.testing.assert_allclose(np.linalg.norm(m, axis=0), 1.0)
    assert seen[0]["model"] == "emb-model"
    assert seen[0]["input"] == ["alpha", "beta"]
    assert provider.embed_sentence("alpha beta").shape == (16,)


def test_remote_provider_reports_http_errors(spec):
    transport = httpx.MockTransport(lambda request: httpx.Response(503, text="down"))
    provider = RemoteEmbeddingProvider(spec, "http://embed.test", "m", api_key="k", transport=transport)
    with pytest.raises(BackendError) as exc_info:
        provider.embed_sentence("text")
    assert exc_info.value.status == 503


def test_hash_provider_memoizes_read_only_arrays(provider):
    first = provider.embed_tokens("x y z")
    assert provider.embed_tokens("x y z") is first
    assert provider.embed_sentence("x y z") is provider.embed_sentence("x y z")
    assert not first.flags.writeable
    with pytest.raises(ValueError):
        first[0, 0] = 1.0


def test_token_summary_is_the_sentence_of_the_token_matrix(provider):
    text = "a long template with more words than token positions"
    np.testing.assert_array_equal(provider.embed_token_summary(text), sentence_of(provider.embed_tokens(text)))


def test_nearest_texts_ranks_with_the_given_representation(provider):
    candidates = [f"lead{i} shared words that run past the token window tail{i}" for i in range(6)]
    query = provider.embed_token_summary(candidates[4])
    ranked = nearest_texts(provider, query, candidates, 2, represent=provider.embed_token_summary)
    assert ranked[0].index == 4
    assert ranked[0].score == pytest.approx(1.0)
