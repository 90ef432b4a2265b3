"""Analytic compute accounting for the backbone and the ToFe modules.

One FLOP here is one multiply-accumulate. Only linear projections, the two
attention matmuls and the MLP are billed; layer norms, softmax, residual and
bias adds are not.
"""

import logging
from typing import List, Optional, Sequence, Union

import torch
from torch.utils.flop_counter import FlopCounterMode

from app.core.errors import ContractViolation, ShapeError
from app.models.config import ModelConfig, StagePlan
from app.models.reports import BlockFlops, FlopsReport

logger = logging.getLogger(__name__)

Count = Union[int, float, torch.Tensor]


def _block_cost(tokens: Count, embed_dim: int, hidden_dim: int) -> Count:
    return (
        4 * tokens * embed_dim * embed_dim
        + 2 * tokens * tokens * embed_dim
        + 2 * tokens * embed_dim * hidden_dim
    )


def flops_per_block(tokens: Union[int, float], embed_dim: int, hidden_dim: int) -> Union[int, float]:
    """Cost of one transformer block on ``tokens`` tokens.

    Args:
        tokens: Token count N_l, [CLS] included
        embed_dim: Embedding width D
        hidden_dim: MLP hidden width

    Returns:
        4·N·D² + 2·N²·D + 2·N·D·D_hidden (integer for integer inputs)
    """
    if tokens < 1:
        raise ContractViolation(f"a block needs at least one token, got {tokens}")
    return _block_cost(tokens, embed_dim, hidden_dim)


def selector_macs_per_token(embed_dim: int, kind: str = "mlp") -> int:
    """Linear-layer cost of one selector for one token.

    ``local_global`` adds its D→D projection; the pooling is not billed.
    """
    half, quarter = embed_dim // 2, embed_dim // 4
    cost = embed_dim * half + half * quarter + quarter * 2
    if kind == "local_global":
        cost += embed_dim * embed_dim
    return cost


def approximator_macs(cfg: ModelConfig, kind: str, frozen: Count) -> Count:
    """Cost of one approximator call for one instance.

    Row-wise kinds are billed on the ``frozen`` tokens they update. ``dwconv``
    convolves the whole patch grid and ``block`` runs a full block on all
    N+1 tokens, whatever the frozen count.
    """
    d = cfg.embed_dim
    if kind == "identity":
        return 0
    if kind == "bottleneck":
        return 2 * d * (d // 4) * frozen
    if kind == "dwconv":
        return 9 * d * cfg.num_patches
    if kind == "block":
        return flops_per_block(cfg.num_tokens, d, cfg.hidden_dim)
    raise ContractViolation(f"unknown approximator kind: {kind}")


def selector_param_count(embed_dim: int, kind: str = "mlp") -> int:
    """Parameters of one selector: LN, D→D/2, D/2→D/4, D/4→2 (plus D→D for local_global)."""
    half, quarter = embed_dim // 2, embed_dim // 4
    count = 2 * embed_dim + (embed_dim * half + half) + (half * quarter + quarter) + (quarter * 2 + 2)
    if kind == "local_global":
        count += embed_dim * embed_dim + embed_dim
    return count


def approximator_param_count(embed_dim: int, kind: str = "bottleneck", hidden_dim: Optional[int] = None) -> int:
    if kind == "identity":
        return 0
    if kind == "dwconv":
        return 2 * embed_dim + 9 * embed_dim + embed_dim
    if kind == "block":
        if hidden_dim is None:
            raise ContractViolation("a block approximator's parameter count needs hidden_dim")
        d = embed_dim
        return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden_dim + hidden_dim) + (hidden_dim * d + d)
    quarter = embed_dim // 4
    return 2 * embed_dim + (embed_dim * quarter + quarter) + (quarter * embed_dim + embed_dim)


def overhead_flops(
    plan: StagePlan,
    cfg: ModelConfig,
    frozen_counts: Optional[Sequence[Count]] = None,
) -> Count:
    """Selector plus approximator cost for one instance.

    Every selector scores all N patch tokens. A row-wise approximator of
    stage s runs on the tokens frozen during stage s; without
    ``frozen_counts`` that is taken as N, giving the upper bound.
    """
    n = cfg.num_patches
    cost = plan.num_stages * n * selector_macs_per_token(cfg.embed_dim, plan.selector)
    for stage in range(plan.num_approximators):
        frozen = n if frozen_counts is None else frozen_counts[stage]
        cost = cost + approximator_macs(cfg, plan.approximator, frozen)
    return cost


def embed_head_flops(cfg: ModelConfig) -> int:
    """Patch projection on N patches plus the classifier on [CLS]."""
    return cfg.num_patches * cfg.patch_dim * cfg.embed_dim + cfg.embed_dim * cfg.num_classes


def baseline_flops(cfg: ModelConfig) -> int:
    """All blocks at full length (N+1 tokens); embed/head excluded."""
    return cfg.depth * flops_per_block(cfg.num_tokens, cfg.embed_dim, cfg.hidden_dim)


def cls_floor_flops(cfg: ModelConfig, plan: StagePlan) -> int:
    """Cost when every patch token is frozen at the first selector."""
    return instance_flops(cfg, plan, keep_counts=[0] * plan.num_stages).total


def _tokens_per_block(cfg: ModelConfig, plan: StagePlan, keep_counts: Sequence[Count]) -> List[Count]:
    tokens = []
    for block in range(cfg.depth):
        stage = plan.stage_of_block(block)
        tokens.append(cfg.num_tokens if stage is None else keep_counts[stage] + 1)
    return tokens


def instance_flops(
    cfg: ModelConfig,
    plan: StagePlan,
    masks: Optional[Sequence[torch.Tensor]] = None,
    keep_counts: Optional[Sequence[int]] = None,
    target: Optional[float] = None,
) -> FlopsReport:
    """Per-instance cost from hard masks or from kept patch-token counts.

    Blocks before the first selector see all N+1 tokens; a block governed by
    stage s sees the stage-s kept count plus [CLS].

    Args:
        cfg: Backbone geometry
        plan: Selector placement
        masks: Per-stage binary masks of length N
        keep_counts: Per-stage kept patch-token counts (alternative to masks)
        target: Budget carried into the report

    Returns:
        FlopsReport with per-block costs and itemised overhead
    """
    if masks is not None:
        if len(masks) != plan.num_stages:
            raise ShapeError(f"expected {plan.num_stages} stage masks, got {len(masks)}")
        for mask in masks:
            if mask.numel() != cfg.num_patches:
                raise ShapeError(f"mask length {mask.numel()} != patch count {cfg.num_patches}")
        keep_counts = [int(mask.detach().reshape(-1).sum().item()) for mask in masks]
    if keep_counts is None or len(keep_counts) != plan.num_stages:
        raise ContractViolation("instance_flops needs one mask or keep count per stage")

    per_block = [
        BlockFlops(block=block, tokens=n, flops=flops_per_block(n, cfg.embed_dim, cfg.hidden_dim))
        for block, n in enumerate(_tokens_per_block(cfg, plan, keep_counts))
    ]
    frozen = [cfg.num_patches - k for k in keep_counts]
    return FlopsReport.build(per_block, overhead_flops(plan, cfg, frozen), target=target)


def flops_from_counts(counts: torch.Tensor, cfg: ModelConfig, plan: StagePlan) -> torch.Tensor:
    """Differentiable per-instance cost from kept counts of shape [B, S].

    Soft counts (sums of keep probabilities) give the training signal for
    the budget loss; hard counts give the reported value.
    """
    if counts.dim() != 2 or counts.shape[1] != plan.num_stages:
        raise ShapeError(f"expected counts of shape [B, {plan.num_stages}], got {tuple(counts.shape)}")
    per_stage = counts.unbind(dim=1)
    total = counts.new_zeros(counts.shape[0])
    for n in _tokens_per_block(cfg, plan, per_stage):
        total = total + _block_cost(n, cfg.embed_dim, cfg.hidden_dim)
    frozen = [cfg.num_patches - k for k in per_stage]
    return total + overhead_flops(plan, cfg, frozen)


def budget_loss(batch_flops: torch.Tensor, target: float, scale: Optional[float] = None) -> torch.Tensor:
    """Mean squared gap between per-instance cost and the target.

    ``scale`` expresses costs in that unit (baseline FLOPs during training)
    so the loss stays of order one.
    """
    if batch_flops.numel() == 0:
        raise ContractViolation("budget_loss needs a nonempty batch")
    gap = batch_flops - target
    if scale is not None:
        gap = gap / scale
    return (gap * gap).mean()


def count_block_flops(block: torch.nn.Module, tokens: int, embed_dim: int) -> int:
    """Instrumented cost of one forward pass of ``block`` on ``tokens`` tokens.

    Uses torch's operator-level counter, which bills two FLOPs per
    multiply-accumulate; the count is halved to match ``flops_per_block``.
    """
    dtype = next(block.parameters()).dtype
    x = torch.zeros(1, tokens, embed_dim, dtype=dtype)
    with torch.no_grad(), FlopCounterMode(display=False) as counter:
        block(x)
    return counter.get_total_flops() // 2
