from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class BackendKind(str, Enum):
    MOCK = "mock"
    HTTP = "http"


class SelectionMode(str, Enum):
    GREEDY = "greedy"
    EXHAUSTIVE = "exhaustive"


class DiscrepancyMode(str, Enum):
    ACTIVATION = "activation"
    EMBEDDING = "embedding"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class BoundReport(BaseModel):
    check: str
    seed: Optional[int] = None
    lhs: float
    rhs: float
    holds: bool
    slack: float

    @classmethod
    def evaluate(cls, check: str, lhs: float, rhs: float, seed: Optional[int] = None) -> "BoundReport":
        lhs, rhs = float(lhs), float(rhs)
        return cls(check=check, seed=seed, lhs=lhs, rhs=rhs, holds=lhs <= rhs + 1e-9, slack=rhs - lhs)


class EmbedderSpec(BaseModel):
    d_model: int = Field(512, gt=0)
    n_tokens: int = Field(8, gt=0)
    seed: int = 0

    class Config:
        frozen = True


class PoolEntry(BaseModel):
    id: str = Field(..., min_length=1)
    domain: str
    text: str = Field(..., min_length=1)

    class Config:
        frozen = True


class QAProblem(BaseModel):
    id: str = Field(..., min_length=1)
    problem: str = Field(..., min_length=1)
    answer: str
    candidates: List[str] = Field(..., min_length=1)


class AnswerCandidate(BaseModel):
    text: str
    correct: bool = False


class DiscussionConfig(BaseModel):
    n_agents: int = Field(4, ge=2)
    max_rounds: int = Field(8, ge=1)
    beta: float = Field(1.0, ge=0)
    seed: int = 0
    training: bool = False
    lr_context: float = Field(1e-4, gt=0)
    lr_alpha: float = Field(1e-4, gt=0)
    alpha_max: float = Field(100.0, gt=0)
    selection_mode: SelectionMode = SelectionMode.GREEDY
    discrepancy_mode: DiscrepancyMode = DiscrepancyMode.ACTIVATION
    decode_k: int = Field(1, ge=1)
    # ablation switches
    init_context: bool = True
    evolve: bool = True
    tune_alpha: bool = True


class HttpAgentSpec(BaseModel):
    endpoint_url: str = Field(..., min_length=1)
    model_name: str = ""
    temperature: float = Field(0.0, ge=0)
    timeout: float = Field(30.0, gt=0)
    max_retries: int = Field(3, ge=0)
    backoff_base: float = Field(1.0, ge=0)


class RunConfig(DiscussionConfig):
    pool_path: str = "pool.json"
    problems_path: str = "problems.json"
    backend: BackendKind = BackendKind.MOCK
    endpoint: Optional[str] = None
    model_name: str = ""
    output_dir: str = "runs"
    checkpoint_dir: str = "checkpoints"
    training_epochs: int = Field(100, ge=0)
    batch: int = Field(32, ge=1)
    d_model: int = Field(512, gt=0)
    n_tokens: int = Field(8, gt=0)
    scale_dim: int = Field(64, gt=0)
    pool_size: int = Field(100, ge=2)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    train_fraction: float = Field(0.2, gt=0, le=1)
    jobs: int = Field(1, ge=1)
    fixed_context: bool = False
    gamma: float = Field(0.5, ge=0, le=1)
    noise: float = Field(0.0, ge=0)
    recognition: float = Field(0.15, gt=0)
    problem_mix: float = Field(0.3, ge=0)
    temperature: float = Field(0.0, ge=0)
    timeout: float = Field(30.0, gt=0)
    max_retries: int = Field(3, ge=0)
    embedding_endpoint: Optional[str] = None
    embedding_model: str = ""

    @model_validator(mode="after")
    def _http_needs_endpoint(self):
        if self.backend == BackendKind.HTTP and not self.endpoint:
            raise ValueError("backend 'http' requires an endpoint")
        return self

    def embedder_spec(self) -> EmbedderSpec:
        return EmbedderSpec(d_model=self.d_model, n_tokens=self.n_tokens, seed=self.seed)

    def discussion_config(self) -> DiscussionConfig:
        return DiscussionConfig(**{name: getattr(self, name) for name in DiscussionConfig.model_fields})

    def http_agent_spec(self) -> HttpAgentSpec:
        return HttpAgentSpec(
            endpoint_url=self.endpoint or "",
            model_name=self.model_name,
            temperature=self.temperature,
            timeout=self.timeout,
            max_retries=self.max_retries,
        )


class EvolveReport(BaseModel):
    generator_loss: float
    constraint_violation: float
    alpha_after: float


class TranscriptRecord(BaseModel):
    round: int
    agent: int
    instruction: str
    response: str
    answer: str
    activation_norm: float
    alpha: float


class TranscriptSummary(BaseModel):
    final_answer: str
    discrepancy_series: List[float]
    problem_id: str
    correct: Optional[bool] = None


class MetricsRow(BaseModel):
    round: int
    discrepancy: float
    alpha_mean: float
    violation_mean: float


class SelectionRequest(BaseModel):
    problem: str = Field(..., min_length=1)
    n_agents: Optional[int] = Field(None, ge=1)
    mode: SelectionMode = SelectionMode.GREEDY


class SelectionResponse(BaseModel):
    chosen_ids: List[str]
    weights: List[float]
    residual: float


class DiscussionRequest(BaseModel):
    problem_id: str = Field(..., min_length=1)
    problem: str = Field(..., min_length=1)
    candidates: List[str] = Field(..., min_length=1)
    answer: Optional[str] = None
    fixed_context: bool = False


class DiscussionResponse(BaseModel):
    records: List[TranscriptRecord]
    summary: TranscriptSummary


class BoundsRequest(BaseModel):
    seed: int = 0
    samples: int = Field(10, ge=1, le=1000)
