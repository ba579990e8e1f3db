from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException, status

from madctx import checkpoints
from madctx.agents import build_agents
from madctx.attention import AttentionBlock
from madctx.cli import setup
from madctx.context import ContextPool, DistilledProjector, load_pool, select_initial_contexts
from madctx.engine import run_discussion
from madctx.exceptions import BackendError, CheckpointError, MadError
from madctx.schemas import (
    BoundReport,
    BoundsRequest,
    DiscussionRequest,
    DiscussionResponse,
    PoolEntry,
    QAProblem,
    RunConfig,
    SelectionRequest,
    SelectionResponse,
)
from madctx.verification import run_verification

load_dotenv()


def create_app(config: Optional[RunConfig] = None) -> FastAPI:
    config = config or RunConfig()
    provider, block = setup(config)
    app = FastAPI(title="Multi-Agent Context API")
    cache = {}

    def get_pool() -> ContextPool:
        if "pool" not in cache:
            if not Path(config.pool_path).exists():
                raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Pool file not found")
            try:
                cache["pool"] = load_pool(config.pool_path)
            except MadError as e:
                raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        return cache["pool"]

    def get_projector() -> DistilledProjector:
        if "projector" not in cache:
            try:
                cache["projector"] = checkpoints.load_distilled(config.checkpoint_dir)
            except CheckpointError as e:
                raise HTTPException(status_code=status.HTTP_409_CONFLICT, detail=f"No trained projector: {e}")
        return cache["projector"]

    @app.get("/health")
    async def health():
        return {"status": "ok"}

    @app.get("/pool", response_model=List[PoolEntry])
    async def get_pool_entries():
        return list(get_pool().entries)

    @app.post("/selections", response_model=SelectionResponse)
    def create_selection(request: SelectionRequest):
        pool = get_pool()
        projector = get_projector()
        try:
            result = select_initial_contexts(
                pool, request.problem, projector, provider, request.n_agents or config.n_agents, request.mode
            )
        except MadError as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        return SelectionResponse(
            chosen_ids=result.chosen_ids, weights=[float(w) for w in result.weights], residual=result.residual
        )

    @app.post("/discussions", response_model=DiscussionResponse)
    async def create_discussion(request: DiscussionRequest):
        pool = get_pool()
        problem = QAProblem(
            id=request.problem_id,
            problem=request.problem,
            answer=request.answer or "",
            candidates=request.candidates,
        )
        projector, generators, duals = None, None, None
        if not request.fixed_context:
            projector = get_projector()
            try:
                generators = checkpoints.load_generators(config.checkpoint_dir, config.n_agents)
                duals = checkpoints.load_duals(config.checkpoint_dir)
            except CheckpointError as e:
                raise HTTPException(status_code=status.HTTP_409_CONFLICT, detail=f"No trained generators: {e}")
        try:
            agents = build_agents(config, provider, [problem])
            transcript = await run_discussion(
                config.discussion_config(), pool, projector, generators, agents, problem, block, provider, duals
            )
        except BackendError as e:
            raise HTTPException(status_code=status.HTTP_502_BAD_GATEWAY, detail=str(e))
        except MadError as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
        return DiscussionResponse(records=transcript.records, summary=transcript.summary)

    @app.post("/bounds", response_model=List[BoundReport])
    def create_bounds(request: BoundsRequest):
        bound_block = AttentionBlock.seeded(config.d_model, config.scale_dim, request.seed)
        return list(run_verification(bound_block, seed=request.seed, samples=request.samples))

    return app
