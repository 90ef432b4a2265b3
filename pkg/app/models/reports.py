"""Structured records emitted by training, evaluation and benchmarking."""

import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.config import ModelConfig, StagePlan


class BlockFlops(BaseModel):
    """Cost of one transformer block for one instance."""

    block: int
    tokens: float = Field(ge=1)
    flops: float


class FlopsReport(BaseModel):
    """Per-instance analytic cost; totals always itemise module overhead."""

    per_block: List[BlockFlops]
    overhead_flops: float = 0.0
    total: float
    target: Optional[float] = None

    @model_validator(mode="after")
    def _check_total(self) -> "FlopsReport":
        expected = sum(entry.flops for entry in self.per_block) + self.overhead_flops
        if not math.isclose(self.total, expected, rel_tol=1e-12, abs_tol=1e-9):
            raise ValueError(f"total {self.total} != blocks + overhead {expected}")
        return self

    @classmethod
    def build(
        cls,
        per_block: List[BlockFlops],
        overhead_flops: float,
        target: Optional[float] = None,
    ) -> "FlopsReport":
        total = sum(entry.flops for entry in per_block) + overhead_flops
        return cls(per_block=per_block, overhead_flops=overhead_flops, total=total, target=target)

    @property
    def block_flops(self) -> float:
        return self.total - self.overhead_flops


class AvgKeepCounts(BaseModel):
    """Average kept patch tokens per stage as measured during training.

    ``running`` is the moving average; ``counts`` is the integer snapshot
    used by batch-adaptive inference.
    """

    running: List[float]
    counts: List[int]

    @field_validator("counts")
    @classmethod
    def _nonnegative(cls, counts: List[int]) -> List[int]:
        if any(count < 0 for count in counts):
            raise ValueError("keep counts must be nonnegative")
        return counts


class TrainingRecord(BaseModel):
    """One line of the training log."""

    phase: Literal["backbone", "tofe"]
    epoch: int
    step: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_apr: float = 0.0
    loss_flops: float = 0.0
    batch_gflops: Optional[float] = None
    keep_counts: List[float] = Field(default_factory=list)
    train_accuracy: float
    eval_accuracy: Optional[float] = None


class RunReport(BaseModel):
    """Result of an evaluation or benchmark run.

    Fields prefixed ``wall_clock`` are the only ones allowed to differ
    between runs with identical seeds.
    """

    model_config = ConfigDict(extra="forbid")

    command: str
    mode: Optional[Literal["baseline", "instance", "batch"]] = None
    num_images: int = 0
    batch_size: int = 1
    top1: Optional[float] = Field(None, ge=0, le=100)
    keep_ratios: List[float] = Field(default_factory=list)
    gflops_mean: Optional[float] = None
    gflops_blocks: Optional[float] = None
    gflops_overhead: Optional[float] = None
    gflops_embed_head: Optional[float] = None
    baseline_gflops: Optional[float] = None
    artifacts: List[str] = Field(default_factory=list)
    reused_mean: List[float] = Field(default_factory=list)
    reused_ratio: List[float] = Field(default_factory=list)
    reuse_positive_fraction: List[float] = Field(default_factory=list)
    extra: Dict[str, float] = Field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    wall_clock_ms_per_image: Optional[float] = None

    @field_validator("keep_ratios")
    @classmethod
    def _ratios_in_unit_interval(cls, ratios: List[float]) -> List[float]:
        for ratio in ratios:
            if not 0.0 <= ratio <= 1.0:
                raise ValueError(f"keep ratio {ratio} outside [0, 1]")
        return ratios

    def deterministic_view(self) -> dict:
        """Report fields without wall-clock measurements."""
        return self.model_dump(exclude={"wall_clock_seconds", "wall_clock_ms_per_image"})


class CheckpointMeta(BaseModel):
    """Metadata blob stored alongside checkpoint tensors."""

    kind: Literal["backbone", "tofe"]
    model: ModelConfig
    plan: Optional[StagePlan] = None
    avg_counts: Optional[AvgKeepCounts] = None
