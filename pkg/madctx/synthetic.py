"""Deterministic synthetic instruction pools and multiple-candidate QA suites."""
import json
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from madctx.context import ContextPool
from madctx.exceptions import ConfigurationError
from madctx.schemas import PoolEntry, QAProblem

logger = logging.getLogger(__name__)

DOMAINS = {
    "mathematics": [
        "Work through the problem as a mathematician, checking every arithmetic step",
        "Estimate the magnitude of the result first, then compute it exactly",
        "Rewrite the question as an equation before solving it",
        "Look for an invariant or a simpler equivalent problem",
    ],
    "science": [
        "Reason like an experimental scientist and state the quantities involved",
        "Check units and orders of magnitude before committing to an answer",
        "Form a hypothesis, test it against the facts given, and revise it",
        "Explain the mechanism behind the answer in plain terms",
    ],
    "coding": [
        "Treat the problem as a program: define inputs, trace the computation, verify the output",
        "Think about edge cases a careful code reviewer would raise",
        "Break the task into small functions and evaluate each one",
        "Simulate the procedure step by step as an interpreter would",
    ],
    "embodied reasoning": [
        "Picture the situation physically and track each object's state",
        "Plan the sequence of actions needed and check each precondition",
        "Describe what an agent moving through the scene would observe",
        "Keep a running inventory of what is known after each step",
    ],
}

STYLES = [
    "Be concise.",
    "Show the key intermediate results.",
    "Point out where other agents may have gone wrong.",
    "Prefer the simplest explanation that fits.",
    "Double-check the final value.",
]


def make_pool(size: int = 100, seed: int = 0) -> ContextPool:
    """`size` templates cycling through every domain; wording varies with the seed."""
    if size < 2:
        raise ConfigurationError("pool size must be at least 2")
    rng = np.random.default_rng(seed)
    domains = sorted(DOMAINS)
    entries = []
    for i in range(size):
        domain = domains[i % len(domains)]
        perspectives = DOMAINS[domain]
        perspective = perspectives[int(rng.integers(len(perspectives)))]
        style = STYLES[int(rng.integers(len(STYLES)))]
        # leading tag keeps truncated token embeddings distinct across entries
        entries.append(PoolEntry(id=f"ctx-{i:03d}", domain=domain, text=f"Perspective {i}: {perspective}. {style}"))
    return ContextPool(entries)


def _arithmetic(rng: np.random.Generator) -> Tuple[str, int]:
    a, b = int(rng.integers(2, 60)), int(rng.integers(2, 60))
    kind = int(rng.integers(3))
    if kind == 0:
        return f"What is {a} plus {b} ?", a + b
    if kind == 1:
        return f"What is {a} times {b} ?", a * b
    return f"A box holds {a} items and {b} more are added. How many items are in the box ?", a + b


def make_qa_suite(size: int = 20, seed: int = 0, n_candidates: int = 4) -> List[QAProblem]:
    if size < 1:
        raise ConfigurationError("suite size must be at least 1")
    rng = np.random.default_rng(seed)
    problems = []
    for i in range(size):
        question, answer = _arithmetic(rng)
        wrong = set()
        while len(wrong) < n_candidates - 1:
            offset = int(rng.integers(1, 10)) * (1 if rng.random() < 0.5 else -1)
            if answer + offset != answer and answer + offset >= 0:
                wrong.add(answer + offset)
        candidates = [str(v) for v in sorted(wrong | {answer})]
        problems.append(QAProblem(id=f"q-{i:03d}", problem=question, answer=str(answer), candidates=candidates))
    return problems


def train_split(problems: Sequence[QAProblem], fraction: float = 0.2, seed: int = 0) -> Tuple[List[QAProblem], List[QAProblem]]:
    """Seeded split into (train, held-out); at least one training problem, input order kept."""
    if not problems:
        raise ConfigurationError("cannot split an empty problem list")
    count = max(1, int(round(fraction * len(problems))))
    chosen = set(np.random.default_rng(seed).permutation(len(problems))[:count].tolist())
    train = [p for i, p in enumerate(problems) if i in chosen]
    held_out = [p for i, p in enumerate(problems) if i not in chosen]
    return train, held_out


def save_problems(problems: Sequence[QAProblem], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [p.model_dump() for p in problems]
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    logger.info("Wrote %d problems to %s", len(problems), path)


def load_problems(path) -> List[QAProblem]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return [QAProblem(**item) for item in raw]
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Problem file {path} does not exist") from exc
    except (json.JSONDecodeError, TypeError, ValidationError) as exc:
        raise ConfigurationError(f"Invalid problem file {path}: {exc}") from exc
