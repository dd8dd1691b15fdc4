"""
Pydantic schemas for every configuration object and every record the
pipeline writes (graph statistics, prover reports, run and metric logs).
Defaults equal the published hyperparameters wherever one exists.
"""

from datetime import datetime
from enum import Enum
from typing import Optional, List, Tuple, Literal, Dict, Any
from pydantic import BaseModel, Field, field_validator, model_validator


class Sharing(str, Enum):
    """Node sharing applied to the abstract syntax tree"""
    NONE = "none"
    LEAF = "leaf"
    SUBEXPRESSION = "subexpression"


class GraphKind(str, Enum):
    """Structural kind of a TermGraph"""
    TREE = "tree"
    LEAF_SHARED = "leaf_shared"
    SUBEXPR_SHARED = "subexpr_shared"


class Direction(str, Enum):
    """Message flow allowed along structural edges"""
    BOTH = "both"
    TOP_DOWN = "topdown"
    BOTTOM_UP = "bottomup"


class RepresentationConfig(BaseModel):
    """Which of the graph transforms to apply to a term"""
    sharing: Sharing = Field(default=Sharing.SUBEXPRESSION, description="none | leaf | subexpression")
    variable_blinding: bool = Field(default=False, description="Rename variable names to x")
    random_edges: bool = Field(default=False, description="Add 3 random outgoing edges per node")
    direction: Direction = Field(default=Direction.BOTH, description="both | topdown | bottomup")
    random_seed: int = Field(default=0, ge=0, lt=2**64, description="Seed for random edges")

    @model_validator(mode="after")
    def check_direction(self):
        if self.direction != Direction.BOTH and self.sharing != Sharing.SUBEXPRESSION:
            raise ValueError("topdown/bottomup direction requires subexpression sharing")
        return self


class GnnConfig(BaseModel):
    """Message-passing encoder and pooling head sizes"""
    hops: int = Field(default=12, ge=0, description="Message passing rounds (T - 1)")
    token_embedding_size: int = Field(default=128, ge=1)
    node_embedding_size: int = Field(default=128, ge=1)
    mlp_hidden_size: int = Field(default=256, ge=1, description="Hidden width of every GNN MLP")
    pooling_widths: Tuple[int, int] = Field(default=(512, 1024), description="1x1 projection widths before max pooling")
    dropout_keep: float = Field(default=0.5, gt=0.0, le=1.0, description="Keep probability inside GNN MLPs and pooling")
    token_init_std: float = Field(default=0.1, gt=0.0)
    residual_init_scale: float = Field(
        default=0.0, ge=0.0,
        description="Scale of the last layer of each update MLP at init; 0 starts every round as the identity"
    )

    @property
    def embedding_size(self) -> int:
        return self.pooling_widths[-1]


class HeadConfig(BaseModel):
    """Tactic classifier and combiner network"""
    n_tactics: int = Field(default=41, ge=1)
    tactic_hidden: Tuple[int, int] = Field(default=(512, 256))
    combiner_hidden: Tuple[int, int] = Field(default=(1024, 512))
    dropout_keep: float = Field(default=0.7, gt=0.0, le=1.0, description="Keep probability before dense layers outside the GNNs")


class LossWeights(BaseModel):
    """Weights of the three loss terms"""
    tactic: float = Field(default=1.0, ge=0.0)
    pairwise: float = Field(default=0.2, ge=0.0)
    aucroc: float = Field(default=4.0, ge=0.0)
    same_goal_factor: float = Field(default=2.0, gt=0.0, description="AUCROC multiplier for same-goal comparisons")
    aucroc_reduction: Literal["sum", "mean"] = "sum"


class OptimizerConfig(BaseModel):
    """Adam, learning-rate decay and Polyak averaging"""
    learning_rate: float = Field(default=1e-4, gt=0.0)
    decay_rate: float = Field(default=0.98, gt=0.0, le=1.0)
    decay_steps: int = Field(default=1000, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)
    polyak_rate: float = Field(default=0.9999, ge=0.0, le=1.0)


class BatchConfig(BaseModel):
    """Positive goals and sampled negatives per batch"""
    goals: int = Field(default=16, ge=1)
    negatives_per_goal: int = Field(default=15, ge=1)

    @property
    def premises(self) -> int:
        return self.goals * (1 + self.negatives_per_goal)

    @property
    def pairs(self) -> int:
        return self.goals * self.premises


class ProverConfig(BaseModel):
    """Breadth-first proof search budgets"""
    k1: int = Field(default=5, ge=1, description="Tactics tried per goal")
    k2: int = Field(default=20, ge=1, description="Premises attached per tactic")
    max_expansions: int = Field(default=100, ge=0)
    time_budget_s: float = Field(default=60.0, gt=0.0)
    workers: int = Field(default=1, ge=1)


class TrainConfig(BaseModel):
    """Training loop settings"""
    steps: int = Field(default=1000, ge=0)
    eval_every: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    precision: Literal["float32", "float64"] = "float32"
    selection_every: int = Field(default=20, ge=2, description="Every n-th training theorem is held out for checkpoint selection")


class RunConfig(BaseModel):
    """Full effective configuration of one run"""
    representation: RepresentationConfig = Field(default_factory=RepresentationConfig)
    gnn: GnnConfig = Field(default_factory=GnnConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch: BatchConfig = Field(default_factory=BatchConfig)
    prover: ProverConfig = Field(default_factory=ProverConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    theorem_db: Optional[str] = None
    proof_log: Optional[str] = None
    checkpoint: Optional[str] = None


class GraphStats(BaseModel):
    """Size and depth of one graph"""
    node_count: int = Field(..., ge=0)
    edge_count: int = Field(..., ge=0)
    depth: int = Field(..., ge=0, description="Longest structural path from the root, in edges")

    @model_validator(mode="after")
    def check_depth(self):
        if self.node_count and self.depth >= self.node_count:
            raise ValueError("depth must be smaller than node_count")
        return self


class ProofRecord(BaseModel):
    """Outcome of the proof search for one theorem"""
    index: int
    name: str
    closed: bool
    proof_length: int = 0
    expansions: int = 0
    tactic_successes: int = 0
    tactic_attempts: int = 0


class ProverSummary(BaseModel):
    """Footer of a prover report"""
    theorems: int
    closed: int
    closed_fraction: float
    mean_proof_length: float = Field(..., description="Mean over closed theorems, 0 if none closed")
    tactic_success_rate: float


class ProverReport(BaseModel):
    """Per-theorem records plus summary"""
    records: List[ProofRecord] = Field(default_factory=list)
    summary: ProverSummary

    class Config:
        json_schema_extra = {
            "example": {
                "records": [{"index": 31, "name": "thm_31", "closed": True, "proof_length": 2,
                             "expansions": 3, "tactic_successes": 4, "tactic_attempts": 15}],
                "summary": {"theorems": 1, "closed": 1, "closed_fraction": 1.0,
                            "mean_proof_length": 2.0, "tactic_success_rate": 0.2667}
            }
        }


class MetricRecord(BaseModel):
    """One line of the training metrics log (no timestamp, so logs are reproducible)"""
    step: int
    total_loss: float
    tactic_loss: float
    pairwise_loss: float
    aucroc_loss: float
    learning_rate: float
    tactic_accuracy: Optional[float] = None
    relative_premise_accuracy: Optional[float] = None
    selected: bool = False


class RunEvent(BaseModel):
    """Audit log entry"""
    timestamp: str = Field(default_factory=lambda: datetime.now().isoformat())
    action: str = Field(..., description="Action performed")
    component: str = Field(..., description="Module or command that acted")
    details: Dict[str, Any] = Field(default_factory=dict, description="Inputs, outputs or configuration")
    success: bool = Field(..., description="Whether action succeeded")
    error_message: Optional[str] = Field(None, description="Error message if failed")

    @field_validator("action", "component")
    def validate_names(cls, v):
        if not v or not v.strip():
            raise ValueError("action and component cannot be empty")
        return v.strip()
