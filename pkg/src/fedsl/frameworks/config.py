from __future__ import annotations

import enum
from dataclasses import dataclass, field

from fedsl.errors import ValidationError
from fedsl.nn_core import ModelSpec, Params
from fedsl.split_model import SplitPlan


class FrameworkKind(str, enum.Enum):
    SYNC = "sync"
    SEQUENTIAL = "sequential"
    ASYNC = "async"
    HIERARCHICAL = "hierarchical"
    HETEROGENEOUS = "heterogeneous"


@dataclass
class DistillConfig:
    period: int = 25
    temperature: float = 2.0
    weight: float = 0.5
    public_size: int = 512
    steps: int = 5
    lr: float | None = None  # None: reuse the training learning rate

    def validate(self):
        if self.period < 1 or self.steps < 0 or self.public_size < 1:
            raise ValidationError("distill period/public_size must be >= 1 and steps >= 0")
        if not self.temperature > 0:
            raise ValidationError("distill temperature must be positive")
        if not 0.0 <= self.weight <= 1.0:
            raise ValidationError("distill weight must be in [0, 1]")


@dataclass
class FrameworkConfig:
    kind: FrameworkKind = FrameworkKind.SYNC
    num_clients: int = 10
    k: int = 5
    aggregation_period: int = 25
    local_iters: int = 5
    batch_size: int = 32
    lr: float = 0.001
    staleness_exponent: float = 0.5
    max_retransmissions: int | None = None
    time_budget_s: float | None = None
    rounds: int | None = 200
    eval_every: int = 5
    quant_bits: int | None = None
    timeout_factor: float = 5.0
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        self.kind = FrameworkKind(self.kind)

    def validate(self):
        if self.num_clients < 1:
            raise ValidationError("need at least one client")
        # k only matters for the threshold (async) mode.
        if self.kind is FrameworkKind.ASYNC and not 1 <= self.k <= self.num_clients:
            raise ValidationError(f"k={self.k} outside [1, {self.num_clients}]")
        if self.local_iters < 1 or self.aggregation_period < 1 or self.eval_every < 1:
            raise ValidationError("local_iters, aggregation_period and eval_every must be >= 1")
        if self.batch_size < 1 or not self.lr >= 0:
            raise ValidationError("batch_size must be >= 1 and lr >= 0")
        if self.staleness_exponent < 0:
            raise ValidationError("staleness exponent must be non-negative")
        if self.rounds is None and self.time_budget_s is None:
            raise ValidationError("need a round limit or a time budget")
        if self.quant_bits is not None and not 1 <= self.quant_bits <= 16:
            raise ValidationError("quant_bits must be in [1, 16]")
        self.distill.validate()


@dataclass
class ClusterSpec:
    id: int
    members: list[int]
    spec: ModelSpec
    plan: SplitPlan
    params: Params | None = None

    def __post_init__(self):
        if not self.members:
            raise ValidationError(f"cluster {self.id} has no members")
