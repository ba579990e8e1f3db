import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from madctx.attention import AttentionBlock
from madctx.context import ContextPool
from madctx.embedding import HashEmbeddingProvider
from madctx.schemas import EmbedderSpec, PoolEntry, QAProblem
from madctx.synthetic import make_pool, make_qa_suite


@pytest.fixture
def spec():
    return EmbedderSpec(d_model=16, n_tokens=4, seed=0)


@pytest.fixture
def provider(spec):
    return HashEmbeddingProvider(spec)


@pytest.fixture
def block():
    return AttentionBlock.seeded(16, scale_dim=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pool():
    return make_pool(8, seed=0)


@pytest.fixture
def short_pool():
    """Templates of exactly four distinct tokens, so token and sentence embeddings agree."""
    return ContextPool(
        [
            PoolEntry(id=f"t-{i:02d}", domain="test", text=f"alpha{i} beta{i} gamma{i} delta{i}")
            for i in range(20)
        ]
    )


@pytest.fixture
def suite():
    return make_qa_suite(4, seed=0)


@pytest.fixture
def problem():
    return QAProblem(id="q-test", problem="What is 3 plus 4 ?", answer="7", candidates=["5", "6", "7", "8"])

GOLDEN_DIR = Path(__file__).parent / "fixtures" / "golden"
UPDATE_GOLDEN_ENV = "MADCTX_UPDATE_GOLDEN"


class GoldenRuns:
    """
    Byte-for-byte comparison of a run directory against tests/fixtures/golden/<name>.

    A missing golden directory, or MADCTX_UPDATE_GOLDEN=1, records the run instead;
    check() then returns False so the caller can skip with a note.
    """

    def __init__(self, root: Path, update: bool):
        self.root = root
        self.update = update

    def check(self, name: str, run_dir: Path) -> bool:
        expected = self.root / name
        produced = sorted(p.name for p in run_dir.iterdir() if p.is_file())
        if self.update or not expected.exists():
            shutil.rmtree(expected, ignore_errors=True)
            expected.mkdir(parents=True)
            for file_name in produced:
                shutil.copyfile(run_dir / file_name, expected / file_name)
            return False
        assert sorted(p.name for p in expected.iterdir()) == produced
        for file_name in produced:
            assert (run_dir / file_name).read_bytes() == (expected / file_name).read_bytes(), file_name
        return True


@pytest.fixture
def golden():
    return GoldenRuns(GOLDEN_DIR, os.getenv(UPDATE_GOLDEN_ENV) == "1")
