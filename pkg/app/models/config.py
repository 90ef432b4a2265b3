"""Validated configuration models derived from application settings."""

import math
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ModelConfig(BaseModel):
    """Vision transformer geometry.

    Block count, embedding width, head count and MLP width follow the usual
    ViT naming (L, D, H, D_hidden). The patch-token count N is derived.
    """

    model_config = ConfigDict(frozen=True)

    image_size: int = Field(64, gt=0)
    patch_size: int = Field(8, gt=0)
    channels: int = Field(1, gt=0)
    depth: int = Field(8, gt=0)
    embed_dim: int = Field(64, gt=0)
    num_heads: int = Field(4, gt=0)
    mlp_hidden: Optional[int] = None
    num_classes: int = Field(10, gt=1)
    ln_eps: float = 1e-6

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.mlp_hidden is not None and self.mlp_hidden < self.embed_dim:
            raise ValueError(
                f"mlp_hidden {self.mlp_hidden} must be >= embed_dim {self.embed_dim}"
            )
        return self

    @property
    def hidden_dim(self) -> int:
        """MLP hidden width (defaults to 4·D)."""
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.embed_dim

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        """Patch tokens plus [CLS]."""
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


class StagePlan(BaseModel):
    """Where token selectors sit and how frozen tokens are handled.

    ``locations`` are 1-based block indices: the stage-s selector runs right
    before block ``locations[s]``. Stage s governs blocks up to (but not
    including) the next location; the last stage runs through the final block.
    """

    model_config = ConfigDict(frozen=True)

    locations: Tuple[int, ...] = (3, 5, 7)
    depth: int = Field(8, gt=0)
    approximator: Literal["bottleneck", "identity", "dwconv", "block"] = "bottleneck"
    selector: Literal["mlp", "local_global"] = "mlp"
    reuse_tokens: bool = True

    @model_validator(mode="after")
    def _check_locations(self) -> "StagePlan":
        if not self.locations:
            raise ValueError("a stage plan needs at least one selector location")
        previous = 0
        for loc in self.locations:
            if loc <= previous:
                raise ValueError(f"selector locations must be strictly ascending: {self.locations}")
            previous = loc
        if self.locations[0] < 1 or self.locations[-1] > self.depth:
            raise ValueError(
                f"selector locations {self.locations} must lie within blocks 1..{self.depth}"
            )
        return self

    @property
    def num_stages(self) -> int:
        return len(self.locations)

    @property
    def num_approximators(self) -> int:
        return self.num_stages - 1

    def stage_start(self, stage: int) -> int:
        """0-based index of the first block governed by ``stage``."""
        return self.locations[stage] - 1

    def stage_end(self, stage: int) -> int:
        """0-based index one past the last block governed by ``stage``."""
        if stage + 1 < self.num_stages:
            return self.locations[stage + 1] - 1
        return self.depth

    def stage_of_block(self, block: int) -> Optional[int]:
        """Stage governing 0-based ``block``; None for blocks before the first selector."""
        governing = None
        for stage in range(self.num_stages):
            if block >= self.stage_start(stage):
                governing = stage
        return governing


class LossWeights(BaseModel):
    """Weights of the joint objective."""

    model_config = ConfigDict(frozen=True)

    lambda_cls: float = Field(1.0, ge=0)
    lambda_apr: float = Field(2.0, ge=0)
    lambda_flops: float = Field(5.0, ge=0)

    @field_validator("lambda_cls", "lambda_apr", "lambda_flops")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("loss weights must be finite")
        return value


class TrainConfig(BaseModel):
    """Optimisation recipe for either the backbone or the ToFe fine-tune."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(15, ge=1)
    warmup_epochs_frozen_backbone: int = Field(2, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_final: float = Field(1e-5, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    target_flops: Optional[float] = Field(None, gt=0)
    seed: int = 0
    temperature: float = Field(1.0, gt=0)
    keep_count_decay: float = Field(0.99, gt=0, lt=1)


class DatasetSpec(BaseModel):
    """Synthetic shapes dataset description; generation is a pure function of it."""

    model_config = ConfigDict(frozen=True)

    num_train: int = Field(5000, ge=1)
    num_eval: int = Field(1000, ge=1)
    image_size: int = Field(64, ge=16)
    num_classes: int = Field(10, ge=2, le=10)
    noise_level: float = Field(0.05, ge=0)
    distractors: int = Field(3, ge=0)
    seed: int = 7

    @model_validator(mode="after")
    def _check_balance(self) -> "DatasetSpec":
        for split, count in (("num_train", self.num_train), ("num_eval", self.num_eval)):
            if count % self.num_classes != 0:
                raise ValueError(
                    f"{split}={count} must be a multiple of num_classes={self.num_classes}"
                )
        return self
