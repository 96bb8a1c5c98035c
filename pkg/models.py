from typing import Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

CostKind = Literal["a2a", "ag", "rs", "ar", "gemm"]
COST_KINDS: tuple[str, ...] = ("a2a", "ag", "rs", "ar", "gemm")

TaskKind = Literal[
    "a2a_dispatch",
    "allgather",
    "expert",
    "reducescatter",
    "a2a_combine",
    "grad_allreduce",
    "dense_compute",
]
Resource = Literal["inter_link", "intra_link", "compute"]

# fields a configuration grid varies, in product order
GRID_KEYS: tuple[str, ...] = ("B", "n_heads", "L", "M", "hscale", "f", "ffn_type")

RESOURCE_OF: dict[str, str] = {
    "a2a_dispatch": "inter_link",
    "a2a_combine": "inter_link",
    "grad_allreduce": "inter_link",
    "allgather": "intra_link",
    "reducescatter": "intra_link",
    "expert": "compute",
    "dense_compute": "compute",
}


# ---------------------------------------------------------------- cost models

class LinearCostModel(BaseModel):
    """t = alpha + n * beta, time in ms."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    alpha: float = Field(0.0, ge=0, alias="alpha_ms")
    beta: float = Field(0.0, ge=0, alias="beta_ms_per_unit")
    unit: Literal["elements", "mac-ops"] = "elements"


class ClusterProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "cluster"
    a2a: LinearCostModel
    ag: LinearCostModel
    rs: LinearCostModel
    ar: LinearCostModel
    gemm: LinearCostModel

    def model(self, kind: str) -> LinearCostModel:
        return getattr(self, kind)


class BenchSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: float = Field(gt=0)
    t: float = Field(gt=0)


# ------------------------------------------------------------------- workload

class LayerConfig(BaseModel):
    """One MoE layer, fields named after the notation table."""

    model_config = ConfigDict(frozen=True)

    B: int = Field(ge=1)
    L: int = Field(ge=1)
    M: int = Field(ge=1)
    H: int = Field(ge=1)
    E: int = Field(ge=1)
    k: int = Field(2, ge=1)
    # None means unlimited capacity ("*" in config documents)
    f: Optional[float] = 1.2
    n_heads: int = Field(8, ge=1)
    ffn_type: Literal["simple", "mixtral"] = "simple"
    t_olp_dense_ms: float = Field(0.0, ge=0)

    @field_validator("f", mode="before")
    @classmethod
    def _star_is_unlimited(cls, value):
        if value == "*":
            return None
        if value is not None and float(value) <= 0:
            raise ValueError("capacity factor f must be positive or '*'")
        return value

    @field_validator("ffn_type", mode="before")
    @classmethod
    def _normalise_ffn(cls, value):
        value = str(value).lower()
        return "simple" if value == "simply" else value

    @field_serializer("f")
    def _dump_f(self, value: Optional[float]):
        return "*" if value is None else value

    @model_validator(mode="after")
    def _check_top_k(self):
        if self.k > self.E:
            raise ValueError(f"top-k {self.k} exceeds the number of experts {self.E}")
        return self

    @classmethod
    def from_table(cls, hscale: int, **fields) -> "LayerConfig":
        """Build from the table's N_hscale = H / M instead of H."""
        return cls(H=hscale * fields["M"], **fields)


class ParallelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    P: int = Field(ge=1)
    n_dp: int = Field(ge=1)
    n_mp: int = Field(ge=1)
    n_ep: int = Field(ge=1)
    n_esp: int = Field(ge=1)
    gpus_per_node: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_groups(self):
        if self.P % self.gpus_per_node:
            raise ValueError(f"P={self.P} is not divisible by gpus_per_node={self.gpus_per_node}")
        if not (self.n_mp == self.n_esp == self.gpus_per_node):
            raise ValueError(
                "n_mp and n_esp must both equal gpus_per_node so that ESP collectives stay inside a node"
            )
        if self.n_ep * self.n_esp != self.P:
            raise ValueError(f"n_ep * n_esp = {self.n_ep * self.n_esp} does not cover P={self.P}")
        if self.n_dp * self.n_mp != self.P:
            raise ValueError(f"n_dp * n_mp = {self.n_dp * self.n_mp} does not cover P={self.P}")
        return self


class GateOutput(BaseModel):
    """Routing decision for N tokens.

    Slot j of token t routes to ``experts[t, j]`` with ``weights[t, j]``;
    an expert index of -1 marks an empty slot (expert-choice routing gives
    tokens a variable number of experts).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    num_experts: int
    experts: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    drop_mask: np.ndarray

    @model_validator(mode="after")
    def _check_arrays(self):
        shape = self.experts.shape
        if self.weights.shape != shape or self.scores.shape != shape or self.drop_mask.shape != shape:
            raise ValueError("gate arrays must share one (tokens, slots) shape")
        used = self.experts[self.experts >= 0]
        if used.size and used.max() >= self.num_experts:
            raise ValueError("expert index out of range")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("combine weights must be finite")
        return self


class DropReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gate: GateOutput
    capacity: int
    dropped: list[tuple[int, int]]
    kept: int


class TaskVolumes(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_a2a: float = Field(ge=0)
    n_ag: float = Field(ge=0)
    n_rs: float = Field(ge=0)
    n_exp: float = Field(ge=0)
    gemm_count: int = Field(2, ge=1)
    n_grad: float = Field(0.0, ge=0)


# ------------------------------------------------------------------ optimizer

class PhaseInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    volumes: TaskVolumes
    profile: ClusterProfile
    t_gar: float = Field(0.0, ge=0)
    exp_multiplier: Literal[1, 2] = 1


class PipelinePlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    r_fwd: int = Field(ge=1)
    r_bwd: int = Field(ge=1)
    case_fwd: int = Field(ge=1, le=4)
    case_bwd: int = Field(ge=1, le=4)
    t_moe_fwd: float
    t_moe_bwd: float
    t_olp_moe_bwd: float = Field(ge=0)
    t_gar_bwd: float = 0.0
    predicates_fwd: list[bool] = Field(default_factory=list)
    predicates_bwd: list[bool] = Field(default_factory=list)
    boundary_fwd: bool = False
    boundary_bwd: bool = False


# ------------------------------------------------------------ grad partition

class GeneralizedLayer(BaseModel):
    """An MoE layer plus the dense operations up to the next MoE layer."""

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    volumes: TaskVolumes
    t_olp_dense: float = Field(0.0, ge=0)
    n_grad: Optional[float] = Field(None, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _default_grad(cls, data):
        if isinstance(data, dict) and data.get("n_grad") is None:
            volumes = data.get("volumes")
            n_grad = volumes.get("n_grad", 0.0) if isinstance(volumes, dict) else getattr(volumes, "n_grad", 0.0)
            data = {**data, "n_grad": n_grad}
        return data


class DEParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    population: Optional[int] = None
    popsize_per_dim: int = Field(15, ge=1)
    generations: int = Field(200, ge=1)
    F: float = Field(0.8, gt=0, le=2)
    CR: float = Field(0.9, ge=0, le=1)
    seed: int = 0
    workers: int = Field(1, ge=1)


class PartitionPlan(BaseModel):
    """Gradient elements per generalized layer, backward order."""

    model_config = ConfigDict(frozen=True)

    n_first: list[float]
    x_g: list[float]
    t_gar: list[float]
    unassigned_tail: float
    # element counts of each separate AllReduce launch, by window
    dense_launches: list[list[float]]
    moe_launches: list[list[float]]
    tail_launches: list[float]
    objective: Optional[float] = None
    label: str = "fsmoe"


# -------------------------------------------------------------- schedule sim

class Task(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    kind: TaskKind
    duration: float = Field(ge=0)
    deps: tuple[str, ...] = ()
    chunk: Optional[int] = None
    # in-order issue queue; defaults to the task's resource
    queue: Optional[str] = None

    @property
    def resource(self) -> str:
        return RESOURCE_OF[self.kind]

    @property
    def lane(self) -> str:
        return self.queue or self.resource


class Timeline(BaseModel):
    model_config = ConfigDict(frozen=True)

    tasks: list[Task]
    start: dict[str, float]
    end: dict[str, float]
    makespan: float
    busy: dict[str, list[tuple[float, float]]]
    idle: dict[str, float]


# ------------------------------------------------------------------------ cli

class RunSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    cluster_profile: str
    # required by plan and simulate, unused by sweep
    layers: Optional[str] = None
    parallel: Union[ParallelConfig, str] = "testbed-a"
    phase: Literal["fwd", "bwd", "both"] = "both"
    r_max: Optional[int] = Field(None, ge=1)
    de: DEParams = Field(default_factory=DEParams)
    output_dir: str = "out"
    seed: Optional[int] = None
    # candidate values overriding the default sweep grid, keyed by GRID_KEYS
    grid: Optional[dict[str, list[Union[int, float, str, None]]]] = None

    @field_validator("grid")
    @classmethod
    def _known_grid_keys(cls, value):
        if value is not None:
            unknown = sorted(set(value) - set(GRID_KEYS))
            if unknown:
                raise ValueError(f"unknown grid keys {unknown}, expected some of {GRID_KEYS}")
            empty = sorted(key for key, values in value.items() if not values)
            if empty:
                raise ValueError(f"grid keys {empty} have no values")
        return value
