"""Budget-aware inference with physical token gathering.

Instance-adaptive mode keeps whatever the selector's argmax keeps, one image
at a time. Batch-adaptive mode keeps exactly the top-N^s tokens by keep
score so every instance in a batch has the same length.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence

import numpy as np
import torch

from app.core import flops as flops_model
from app.core.errors import ConfigError, ContractViolation
from app.models.reports import AvgKeepCounts, FlopsReport
from app.services.tofe_modules import (
    ToFeModel,
    approximate_frozen,
    approximate_in_context,
    partition_tokens,
    rearrange_tokens,
    selector_scores,
    tie_break_top_n,
)

logger = logging.getLogger(__name__)

InferenceMode = Literal["instance", "batch"]


@dataclass
class TokenUsage:
    """Which rows one instance kept at each stage.

    kept_rows[s] lists row indices of the (N+1)-row tensor kept in stage s,
    [CLS] (row 0) included.
    """

    num_patches: int
    kept_rows: List[List[int]] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return len(self.kept_rows)

    def stage_bits(self, stage: int) -> np.ndarray:
        """Length-N 0/1 keep vector over patches for ``stage``."""
        bits = np.zeros(self.num_patches, dtype=np.int64)
        rows = [r - 1 for r in self.kept_rows[stage] if r > 0]
        bits[rows] = 1
        return bits

    def keep_counts(self) -> List[int]:
        return [len(rows) - 1 for rows in self.kept_rows]

    def frequency(self) -> np.ndarray:
        """Per-patch use count: 1 for the blocks before the first selector
        plus one per stage that kept the patch."""
        freq = np.ones(self.num_patches, dtype=np.int64)
        for stage in range(self.num_stages):
            freq += self.stage_bits(stage)
        return freq

    def reused_counts(self) -> List[int]:
        """Per stage s ≥ 1: patches kept at s that were frozen at s−1."""
        counts = []
        for stage in range(1, self.num_stages):
            frozen_before = 1 - self.stage_bits(stage - 1)
            counts.append(int((self.stage_bits(stage) * frozen_before).sum()))
        return counts


@dataclass
class InferenceResult:
    logits: torch.Tensor
    usage: List[TokenUsage]
    flops: List[FlopsReport]
    tokens: Optional[torch.Tensor] = None


def counts_from_ratios(ratios: Sequence[float], num_patches: int) -> List[int]:
    """Fixed keep-ratio schedule to kept counts, rounded half-up into [1, N]."""
    return [min(num_patches, max(1, int(np.floor(r * num_patches + 0.5)))) for r in ratios]


class InferenceEngine:
    """Gather-form ToFe inference.

    Args:
        model: Trained ToFe model
        mode: ``instance`` or ``batch``
        avg_counts: Kept counts recorded during training (batch mode)
        keep_ratios: Fixed per-stage keep ratios, used instead of avg_counts
    """

    def __init__(
        self,
        model: ToFeModel,
        mode: InferenceMode = "instance",
        avg_counts: Optional[AvgKeepCounts] = None,
        keep_ratios: Optional[Sequence[float]] = None,
    ):
        self.model = model.eval()
        self.mode = mode
        self.cfg = model.cfg
        self.plan = model.plan
        self.keep_counts: Optional[List[int]] = None
        if mode == "batch":
            if keep_ratios is not None:
                counts = counts_from_ratios(keep_ratios, self.cfg.num_patches)
            elif avg_counts is not None:
                counts = list(avg_counts.counts)
            else:
                raise ConfigError("batch-adaptive inference needs trained keep counts or keep_ratios")
            if len(counts) != self.plan.num_stages:
                raise ContractViolation(f"{len(counts)} keep counts for {self.plan.num_stages} stages")
            for count in counts:
                if not 1 <= count <= self.cfg.num_patches:
                    raise ContractViolation(f"keep count {count} outside 1..{self.cfg.num_patches}")
            self.keep_counts = counts
        elif mode != "instance":
            raise ContractViolation(f"unknown inference mode: {mode}")

    # -- selection rules -------------------------------------------------

    @staticmethod
    def _argmax_bits(stage: int, z: torch.Tensor, eligible: Optional[torch.Tensor]) -> torch.Tensor:
        bits = (z[..., 0] >= z[..., 1]).to(z.dtype)
        return bits if eligible is None else bits * eligible

    def _top_n_bits(self, stage: int, z: torch.Tensor, eligible: Optional[torch.Tensor]) -> torch.Tensor:
        scores = z[..., 0]
        count = self.keep_counts[stage]
        if eligible is not None:
            scores = scores.masked_fill(eligible == 0, float("-inf"))
            count = min(count, int(eligible.sum(dim=-1).min().item()))
        bits = torch.zeros_like(scores)
        if count > 0:
            bits.scatter_(-1, tie_break_top_n(scores, count), 1.0)
        return bits

    # -- forward ---------------------------------------------------------

    def _gather_forward(
        self,
        images: torch.Tensor,
        select: Callable[[int, torch.Tensor, Optional[torch.Tensor]], torch.Tensor],
    ) -> InferenceResult:
        model, plan = self.model, self.plan
        with torch.no_grad():
            x = model.backbone.embed(images)
            for block in model.prefix_blocks():
                x = block(x)
            batch = x.shape[0]
            usage = [TokenUsage(self.cfg.num_patches) for _ in range(batch)]
            eligible = None
            part = kept = stage_input = None
            for stage in range(plan.num_stages):
                if stage > 0:
                    approximator = model.approximators[stage - 1]
                    if approximator.row_wise:
                        frozen = approximate_frozen(approximator, part.frozen)
                    else:
                        frozen = approximate_in_context(approximator, stage_input, part.frozen_idx)
                    x = rearrange_tokens(kept, frozen, part.kept_idx, part.frozen_idx)
                z = selector_scores(model.selectors[stage], x[:, 1:])
                bits = select(stage, z, eligible)
                if not plan.reuse_tokens:
                    eligible = bits
                part = partition_tokens(x, bits)
                stage_input = x
                kept = part.kept
                for block in model.stage_blocks(stage):
                    kept = block(kept)
                for b in range(batch):
                    usage[b].kept_rows.append([0] + part.kept_idx[b].tolist())
            if plan.num_stages:
                x = rearrange_tokens(kept, part.frozen, part.kept_idx, part.frozen_idx)
            logits = model.backbone.classify(x)
        reports = [
            flops_model.instance_flops(self.cfg, plan, keep_counts=u.keep_counts()) for u in usage
        ]
        return InferenceResult(logits=logits, usage=usage, flops=reports, tokens=x)

    def instance_adaptive_forward(self, image: torch.Tensor) -> InferenceResult:
        """One image ([C, H, W] or [1, C, H, W]) with argmax masks."""
        if image.dim() == 4 and image.shape[0] != 1:
            raise ContractViolation("instance-adaptive inference takes one image at a time")
        return self._gather_forward(image, self._argmax_bits)

    def batch_adaptive_forward(self, images: torch.Tensor) -> InferenceResult:
        """A batch where every instance keeps exactly N^s tokens per stage."""
        if self.keep_counts is None:
            raise ConfigError("engine was not built for batch-adaptive inference")
        return self._gather_forward(images, self._top_n_bits)

    def forward_with_masks(self, images: torch.Tensor, masks: Sequence[torch.Tensor]) -> InferenceResult:
        """Gather-form forward with externally fixed per-stage keep bits [B, N]."""
        if len(masks) != self.plan.num_stages:
            raise ContractViolation(f"{len(masks)} masks for {self.plan.num_stages} stages")
        return self._gather_forward(images, lambda stage, z, eligible: masks[stage].to(z.dtype))

    def forward(self, images: torch.Tensor) -> InferenceResult:
        """Dispatch on mode; instance mode loops over the batch."""
        if self.mode == "batch":
            return self.batch_adaptive_forward(images)
        results = [self.instance_adaptive_forward(image.unsqueeze(0)) for image in images]
        return InferenceResult(
            logits=torch.cat([r.logits for r in results]),
            usage=[u for r in results for u in r.usage],
            flops=[f for r in results for f in r.flops],
            tokens=torch.cat([r.tokens for r in results]),
        )


def token_usage_map(usages: Sequence[TokenUsage], grid_size: int) -> np.ndarray:
    """Mean per-patch use frequency laid out on the patch grid."""
    if not usages:
        raise ContractViolation("token_usage_map needs at least one usage record")
    freq = np.mean([u.frequency() for u in usages], axis=0)
    return freq.reshape(grid_size, grid_size)


def stage_keep_frequency(usages: Sequence[TokenUsage], grid_size: int) -> np.ndarray:
    """[S, grid, grid] fraction of instances keeping each patch per stage."""
    if not usages:
        raise ContractViolation("stage_keep_frequency needs at least one usage record")
    stages = usages[0].num_stages
    grids = [
        np.mean([u.stage_bits(s) for u in usages], axis=0).reshape(grid_size, grid_size)
        for s in range(stages)
    ]
    return np.stack(grids) if grids else np.zeros((0, grid_size, grid_size))
