"""
Command-line entry point.

    python -m madctx init-pool | init-suite | train | discuss | verify-bounds | report | serve

Configuration comes from an optional JSON file (--config) overlaid with flags.
Exit codes: 0 success, 1 validation error, 2 backend/IO error, 3 verification failure.
"""
import argparse
import asyncio
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from madctx import checkpoints
from madctx.agents import build_agents
from madctx.attention import AttentionBlock
from madctx.context import ContextPool, distill_projector, load_pool, save_pool, train_projection
from madctx.embedding import EmbeddingProvider, build_provider
from madctx.engine import DiscussionTranscript, run_discussion, run_problems
from madctx.evolution import DualState, InstructionGenerator
from madctx.exceptions import ConfigurationError, MadError, NonConvergenceError
from madctx.report import cmd_report
from madctx.schemas import RunConfig
from madctx.synthetic import load_problems, make_pool, make_qa_suite, save_problems, train_split
from madctx.verification import require_all_hold, run_verification

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
TRAINING_METRICS_HEADER = ["phase", "epoch", "loss", "violation_mean", "alpha_mean"]

# flag dest -> RunConfig field
FLAG_FIELDS = {
    "pool": "pool_path",
    "problems": "problems_path",
    "agents": "n_agents",
    "rounds": "max_rounds",
    "beta": "beta",
    "seed": "seed",
    "backend": "backend",
    "endpoint": "endpoint",
    "model": "model_name",
    "jobs": "jobs",
    "fixed_context": "fixed_context",
    "out": "output_dir",
    "checkpoints": "checkpoint_dir",
    "epochs": "training_epochs",
    "batch": "batch",
    "d_model": "d_model",
    "n_tokens": "n_tokens",
    "gamma": "gamma",
    "noise": "noise",
    "selection_mode": "selection_mode",
    "discrepancy_mode": "discrepancy_mode",
    "optimizer": "optimizer",
    "init_context": "init_context",
    "evolve": "evolve",
    "tune_alpha": "tune_alpha",
    "problem_mix": "problem_mix",
    "recognition": "recognition",
}


def load_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"Config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Malformed config file {path}: {exc}") from exc
    for dest, name in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[name] = value
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid configuration: {exc}") from exc


def setup(config: RunConfig):
    provider = build_provider(config.embedder_spec(), config.embedding_endpoint, config.embedding_model)
    block = AttentionBlock.seeded(config.d_model, config.scale_dim, config.seed)
    return provider, block


def cmd_init_pool(config: RunConfig, size: Optional[int]) -> ContextPool:
    pool = make_pool(size or config.pool_size, config.seed)
    save_pool(pool, config.pool_path)
    return pool


def cmd_init_suite(config: RunConfig, size: int) -> None:
    save_problems(make_qa_suite(size, config.seed), config.problems_path)


@dataclass
class TrainingOutcome:
    rows: List[list]
    projection_improved: bool
    distillation_improved: bool

    @property
    def improved(self) -> bool:
        return self.projection_improved and self.distillation_improved


def train_all(
    config: RunConfig, pool: ContextPool, provider: EmbeddingProvider, block: AttentionBlock, problems
) -> TrainingOutcome:
    """
    Projection, distillation, then generator/dual training through discussions; writes checkpoints.

    With evolution switched off the generator phase is skipped and the untrained
    generators are saved as they were built.
    """
    train, _ = train_split(problems, config.train_fraction, config.seed)
    logger.info("Training on %d of %d problems", len(train), len(problems))
    common = dict(
        epochs=config.training_epochs,
        lr=config.lr_context,
        batch=config.batch,
        optimizer=config.optimizer.value,
        seed=config.seed,
    )
    rows: List[list] = []

    projection, f_history = train_projection([(p.problem, p.answer) for p in train], block, provider, **common)
    rows += [["projection", epoch, repr(loss), "", ""] for epoch, loss in enumerate(f_history.losses)]

    distilled, d_history = distill_projector(pool, [p.problem for p in train], projection, block, provider, **common)
    rows += [["distillation", epoch, repr(loss), "", ""] for epoch, loss in enumerate(d_history.losses)]

    generators = [
        InstructionGenerator.initial(
            config.d_model, config.n_tokens, agent_id=i, seed=config.seed, problem_mix=config.problem_mix
        )
        for i in range(config.n_agents)
    ]
    duals = [DualState(beta=config.beta, alpha_max=config.alpha_max) for _ in range(config.n_agents)]
    agents = build_agents(config, provider, train)
    cfg = config.discussion_config().model_copy(update={"training": True})
    generator_epochs = config.training_epochs if config.evolve else 0
    for epoch in range(1, generator_epochs + 1):
        reports = []
        for problem in train:
            transcript = asyncio.run(
                run_discussion(cfg, pool, distilled, generators, agents, problem, block, provider, duals)
            )
            reports += transcript.evolve_reports
        rows.append(
            [
                "generator",
                epoch,
                repr(float(np.mean([r.generator_loss for r in reports]))),
                repr(float(np.mean([r.constraint_violation for r in reports]))),
                repr(float(np.mean([d.alpha for d in duals]))),
            ]
        )
        logger.info("Generator epoch %d: loss %s", epoch, rows[-1][2])

    checkpoints.save_all(config.checkpoint_dir, projection, distilled, generators, duals, config.seed)
    return TrainingOutcome(rows, f_history.improved, d_history.improved)


def write_training_metrics(rows: Sequence[list], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRAINING_METRICS_HEADER)
        writer.writerows(rows)


def cmd_train(config: RunConfig) -> TrainingOutcome:
    pool = load_pool(config.pool_path)
    problems = load_problems(config.problems_path)
    provider, block = setup(config)
    outcome = train_all(config, pool, provider, block, problems)
    write_training_metrics(outcome.rows, Path(config.output_dir) / "training_metrics.csv")
    if not outcome.improved:
        raise NonConvergenceError(
            f"Training did not improve: projection improved={outcome.projection_improved}, "
            f"distillation improved={outcome.distillation_improved}"
        )
    return outcome


def cmd_discuss(config: RunConfig) -> List[DiscussionTranscript]:
    pool = load_pool(config.pool_path)
    problems = load_problems(config.problems_path)
    provider, block = setup(config)
    agents = build_agents(config, provider, problems)
    projector, generators, duals = None, None, None
    if not config.fixed_context and config.init_context:
        projector = checkpoints.load_distilled(config.checkpoint_dir)
    if not config.fixed_context and config.evolve:
        generators = checkpoints.load_generators(config.checkpoint_dir, config.n_agents)
        duals = checkpoints.load_duals(config.checkpoint_dir)
    transcripts = asyncio.run(
        run_problems(
            config.discussion_config(),
            pool,
            projector,
            generators,
            agents,
            problems,
            block,
            provider,
            duals,
            jobs=config.jobs,
        )
    )
    for transcript in transcripts:
        transcript.write(config.output_dir)
    graded = [t.summary.correct for t in transcripts if t.summary.correct is not None]
    if graded:
        print(f"accuracy {sum(graded)}/{len(graded)} = {sum(graded) / len(graded):.4f}")
    return transcripts


def cmd_verify_bounds(config: RunConfig, samples: int, rescale: bool) -> int:
    block = AttentionBlock.seeded(config.d_model, config.scale_dim, config.seed)
    reports = list(run_verification(block, seed=config.seed, samples=samples, rescale=rescale))
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bounds.jsonl"
    path.write_text("".join(r.model_dump_json() + "\n" for r in reports), encoding="utf-8")
    held = sum(r.holds for r in reports)
    print(f"bounds {held}/{len(reports)} hold")
    require_all_hold(reports)
    return held


def cmd_serve(config: RunConfig, host: str, port: int) -> None:
    import uvicorn

    from madctx.main import create_app

    uvicorn.run(create_app(config), host=host, port=port)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring RunConfig")
    common.add_argument("--pool", help="pool file path")
    common.add_argument("--problems", help="problem suite path")
    common.add_argument("--agents", type=int)
    common.add_argument("--rounds", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", choices=["mock", "http"])
    common.add_argument("--endpoint")
    common.add_argument("--model")
    common.add_argument("--jobs", type=int)
    common.add_argument("--fixed-context", action="store_true", default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoints", help="checkpoint directory")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--d-model", type=int)
    common.add_argument("--n-tokens", type=int)
    common.add_argument("--gamma", type=float)
    common.add_argument("--noise", type=float)
    common.add_argument("--selection-mode", choices=["greedy", "exhaustive"])
    common.add_argument("--discrepancy-mode", choices=["activation", "embedding"])
    common.add_argument("--optimizer", choices=["adam", "sgd"])
    common.add_argument("--no-init-context", dest="init_context", action="store_false", default=None)
    common.add_argument("--no-evolve", dest="evolve", action="store_false", default=None)
    common.add_argument("--no-tune-alpha", dest="tune_alpha", action="store_false", default=None)
    common.add_argument("--problem-mix", type=float, help="weight on the problem in fresh generators")
    common.add_argument("--recognition", type=float, help="mock agents' problem-alignment threshold")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="madctx", description="Multi-agent discussion with latent context selection")
    sub = parser.add_subparsers(dest="command", required=True)

    init_pool = sub.add_parser("init-pool", parents=[common], help="write a synthetic instruction pool")
    init_pool.add_argument("--size", type=int)
    init_suite = sub.add_parser("init-suite", parents=[common], help="write a synthetic QA suite")
    init_suite.add_argument("--size", type=int, default=20)
    sub.add_parser("train", parents=[common], help="train projectors, generators and duals")
    sub.add_parser("discuss", parents=[common], help="run discussions over a problem suite")
    verify = sub.add_parser("verify-bounds", parents=[common], help="randomized sweep over the bound checkers")
    verify.add_argument("--samples", type=int, default=200)
    verify.add_argument("--no-rescale", action="store_true", help="skip operator-bound rescaling (negative control)")
    report = sub.add_parser("report", parents=[common], help="aggregate run directories into CSVs")
    report.add_argument("runs", nargs="+", help="run directories")
    serve = sub.add_parser("serve", parents=[common], help="serve the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT)
    try:
        config = load_config(args)
        if args.command == "init-pool":
            cmd_init_pool(config, args.size)
        elif args.command == "init-suite":
            cmd_init_suite(config, args.size)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "discuss":
            cmd_discuss(config)
        elif args.command == "verify-bounds":
            cmd_verify_bounds(config, args.samples, rescale=not args.no_rescale)
        elif args.command == "report":
            cmd_report(args.runs, config.output_dir)
        elif args.command == "serve":
            cmd_serve(config, args.host, args.port)
    except MadError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
