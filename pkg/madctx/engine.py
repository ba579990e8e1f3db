"""
The multi-round discussion loop.

Each round every agent receives the context [I ; X̄ ; P] (its instruction, its peers'
previous responses and the problem), all agents answer concurrently, and the round
closes at a barrier where metrics are taken and, in training mode, generators and
dual variables are updated. The final answer is a majority vote over the last round.
"""
import asyncio
import csv
import io
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from madctx.agents import AgentBackend, AgentRequest, AgentResponse
from madctx.attention import AttentionBlock, ContextBundle, activation, context_activation, pairwise_max_squared
from madctx.context import ContextPool, DistilledProjector, fixed_contexts, select_initial_contexts
from madctx.embedding import EmbeddingProvider
from madctx.evolution import (
    COLLABORATION_PREAMBLE,
    DualState,
    InstructionGenerator,
    decode_instruction,
    evolve_step,
    generate_instruction,
)
from madctx.exceptions import DimensionError, DiscussionAbortedError, EmptyInputError, PoolError
from madctx.numerics import concat_columns, frobenius_norm
from madctx.schemas import (
    DiscrepancyMode,
    DiscussionConfig,
    EvolveReport,
    MetricsRow,
    QAProblem,
    TranscriptRecord,
    TranscriptSummary,
)

logger = logging.getLogger(__name__)

# the answer must sit on the marker's own line
ANSWER_PATTERN = re.compile(r"Answer:[ \t]*(.+)")
METRICS_HEADER = ["round", "discrepancy", "alpha_mean", "violation_mean"]


def canonicalize(answer: str) -> str:
    return " ".join(answer.split()).lower()


def extract_answer(response: str) -> str:
    """Text after the last 'Answer:' marker, else the canonicalized response."""
    matches = ANSWER_PATTERN.findall(response)
    if matches:
        return " ".join(matches[-1].split())
    return canonicalize(response)


def majority_vote(answers: Sequence[str]) -> str:
    """
    Modal answer under canonicalization (trim, lowercase, collapse whitespace).

    Ties go to the answer of the earliest agent among the tied groups; the winner is
    returned as that agent wrote it, with whitespace collapsed.
    """
    if not answers:
        raise EmptyInputError("majority_vote needs at least one answer")
    keys = [canonicalize(a) for a in answers]
    counts = Counter(keys)
    top = max(counts.values())
    for answer, key in zip(answers, keys):
        if counts[key] == top:
            return " ".join(answer.split())


def discrepancy_intensity(block: AttentionBlock, responses: Sequence[np.ndarray], problem: np.ndarray) -> float:
    """max over agent pairs of ||a([X_i ; P]) - a([X_j ; P])||^2."""
    if len(responses) < 2:
        raise EmptyInputError("discrepancy needs at least two responses")
    return pairwise_max_squared([activation(block, r, None, problem) for r in responses])


def embedding_discrepancy(responses: Sequence[np.ndarray]) -> float:
    if len(responses) < 2:
        raise EmptyInputError("discrepancy needs at least two responses")
    return pairwise_max_squared(list(responses))


def build_context(
    instruction: np.ndarray, peer_responses: Optional[Sequence[np.ndarray]], problem: np.ndarray
) -> ContextBundle:
    """[I ; X̄ ; P] with X̄ the column concatenation of peers; no peer block when there are none."""
    peers = concat_columns(list(peer_responses)) if peer_responses else None
    for name, part in (("instruction", instruction), ("peers", peers)):
        if part is not None and part.shape[0] != problem.shape[0]:
            raise DimensionError(f"{name} has {part.shape[0]} rows, problem has {problem.shape[0]}")
    return ContextBundle(instruction=instruction, peers=peers, problem=problem)


@dataclass
class DiscussionTranscript:
    problem_id: str
    records: List[TranscriptRecord] = field(default_factory=list)
    metrics: List[MetricsRow] = field(default_factory=list)
    evolve_reports: List[EvolveReport] = field(default_factory=list)
    summary: Optional[TranscriptSummary] = None

    @property
    def rounds_run(self) -> int:
        return len(self.metrics)

    @property
    def discrepancy_series(self) -> List[float]:
        return [row.discrepancy for row in self.metrics]

    @property
    def final_answer(self) -> Optional[str]:
        return self.summary.final_answer if self.summary else None

    def to_jsonl(self) -> str:
        lines = [record.model_dump_json() for record in self.records]
        if self.summary is not None:
            lines.append(self.summary.model_dump_json())
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in self.metrics:
            writer.writerow([row.round, repr(row.discrepancy), repr(row.alpha_mean), repr(row.violation_mean)])
        return buffer.getvalue()

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{self.problem_id}.transcript.jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        (directory / f"{self.problem_id}.metrics.csv").write_text(self.metrics_csv(), encoding="utf-8")


def peer_digest(problem: str, previous: Optional[Sequence[AgentResponse]], agent: int) -> str:
    if not previous:
        return problem
    lines = [f"Agent {j}: {r.text}" for j, r in enumerate(previous) if j != agent]
    return problem + "\n\nOther agents answered:\n" + "\n".join(lines)


async def _ask(agent: AgentBackend, request: AgentRequest) -> AgentResponse:
    return await agent.respond(request)


async def run_discussion(
    cfg: DiscussionConfig,
    pool: ContextPool,
    projector: Optional[DistilledProjector],
    generators: Optional[Sequence[InstructionGenerator]],
    agents: Sequence[AgentBackend],
    problem: QAProblem,
    block: AttentionBlock,
    provider: EmbeddingProvider,
    duals: Optional[Sequence[DualState]] = None,
) -> DiscussionTranscript:
    """
    Run one discussion. Without a projector the first n_agents pool entries are used
    (fixed-context baseline); without generators every round reuses the initial
    instructions. In training mode generators and duals are updated in place.

    Switching off cfg.init_context ignores the projector, and switching off
    cfg.evolve ignores the generators. With cfg.tune_alpha off every dual keeps
    its starting alpha.
    """
    n = cfg.n_agents
    if len(agents) != n:
        raise PoolError(f"{len(agents)} agents supplied for n_agents={n}")
    if generators is not None and len(generators) != n:
        raise PoolError(f"{len(generators)} generators supplied for n_agents={n}")
    if not cfg.init_context:
        projector = None
    if not cfg.evolve:
        generators = None
    if duals is None:
        duals = [DualState(beta=cfg.beta, alpha_max=cfg.alpha_max) for _ in range(n)]

    if projector is not None:
        selection = select_initial_contexts(pool, problem.problem, projector, provider, n, cfg.selection_mode)
        templates = [pool.get(entry_id).text for entry_id in selection.chosen_ids]
    else:
        templates = [entry.text for entry in fixed_contexts(pool, n)]
    init_instructions = [provider.embed_tokens(text) for text in templates]
    problem_embedding = provider.embed_tokens(problem.problem)

    transcript = DiscussionTranscript(problem_id=problem.id)
    previous: Optional[List[AgentResponse]] = None

    for round_index in range(1, cfg.max_rounds + 1):
        requests, instructions = [], []
        for i in range(n):
            peer_list = [r.embedding for j, r in enumerate(previous) if j != i] if previous else None
            peers = concat_columns(peer_list) if peer_list else None
            if generators is not None:
                instruction = generate_instruction(generators[i], problem_embedding, init_instructions[i], peers)
                text = decode_instruction(instruction, pool, provider, cfg.decode_k)
            else:
                instruction = init_instructions[i]
                text = f"{COLLABORATION_PREAMBLE}\n\n{templates[i]}"
            instructions.append((instruction, text, build_context(instruction, peer_list, problem_embedding)))
            requests.append(
                AgentRequest(
                    problem_key=problem.id,
                    round_index=round_index,
                    agent=i,
                    system_text=text,
                    user_text=peer_digest(problem.problem, previous, i),
                    instruction=instruction,
                    peers=peers,
                    problem=problem_embedding,
                    own_previous=previous[i].embedding if previous else None,
                )
            )

        results = await asyncio.gather(
            *[_ask(agent, request) for agent, request in zip(agents, requests)], return_exceptions=True
        )
        for i, result in enumerate(results):
            if isinstance(result, BaseException):
                logger.error("Agent %d failed in round %d of %s: %s", i, round_index, problem.id, result)
                raise DiscussionAbortedError(i, round_index, result, transcript) from result

        responses: List[AgentResponse] = list(results)
        embeddings = [r.embedding for r in responses]
        for i, response in enumerate(responses):
            transcript.records.append(
                TranscriptRecord(
                    round=round_index,
                    agent=i,
                    instruction=instructions[i][1],
                    response=response.text,
                    answer=extract_answer(response.text),
                    activation_norm=frobenius_norm(context_activation(block, instructions[i][2])),
                    alpha=duals[i].alpha,
                )
            )

        if cfg.discrepancy_mode == DiscrepancyMode.EMBEDDING:
            discrepancy = embedding_discrepancy(embeddings)
        else:
            discrepancy = discrepancy_intensity(block, embeddings, problem_embedding)

        violations = []
        for i in range(n):
            if cfg.training and generators is not None:
                peers_now = concat_columns([e for j, e in enumerate(embeddings) if j != i])
                report = evolve_step(
                    generators[i],
                    duals[i],
                    block,
                    problem_embedding,
                    init_instructions[i],
                    embeddings[i],
                    peers_now,
                    cfg.lr_context,
                    cfg.lr_alpha,
                    tune_alpha=cfg.tune_alpha,
                )
                transcript.evolve_reports.append(report)
                violations.append(report.constraint_violation)
            else:
                violations.append(frobenius_norm(instructions[i][0] - init_instructions[i]) - duals[i].beta)

        transcript.metrics.append(
            MetricsRow(
                round=round_index,
                discrepancy=discrepancy,
                alpha_mean=float(np.mean([d.alpha for d in duals])),
                violation_mean=float(np.mean(violations)),
            )
        )
        logger.debug("%s round %d discrepancy %.6g", problem.id, round_index, discrepancy)
        previous = responses

    final_answer = majority_vote([r.answer for r in transcript.records[-n:]])
    correct = None
    if problem.answer:
        correct = canonicalize(final_answer) == canonicalize(problem.answer)
    transcript.summary = TranscriptSummary(
        final_answer=final_answer,
        discrepancy_series=transcript.discrepancy_series,
        problem_id=problem.id,
        correct=correct,
    )
    return transcript


async def run_problems(
    cfg: DiscussionConfig,
    pool: ContextPool,
    projector: Optional[DistilledProjector],
    generators: Optional[Sequence[InstructionGenerator]],
    agents: Sequence[AgentBackend],
    problems: Sequence[QAProblem],
    block: AttentionBlock,
    provider: EmbeddingProvider,
    duals: Optional[Sequence[DualState]] = None,
    jobs: int = 1,
) -> List[DiscussionTranscript]:
    """Inference over many problems, at most `jobs` discussions in flight; results in input order."""
    limit = asyncio.Semaphore(jobs)
    cfg = cfg.model_copy(update={"training": False})

    async def one(problem: QAProblem) -> DiscussionTranscript:
        async with limit:
            frozen = [DualState(d.alpha, d.beta, d.alpha_max) for d in duals] if duals else None
            transcript = await run_discussion(
                cfg, pool, projector, generators, agents, problem, block, provider, frozen
            )
            logger.info("Finished %s: %s", problem.id, transcript.final_answer)
            return transcript

    return list(await asyncio.gather(*[one(p) for p in problems]))
