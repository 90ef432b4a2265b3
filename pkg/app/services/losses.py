"""Classification, approximation and joint losses."""

import math
from typing import Sequence

import torch
import torch.nn.functional as F

from app.core.errors import ContractViolation, NumericError
from app.models.config import LossWeights


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch."""
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ContractViolation(f"labels must lie in 0..{num_classes - 1}")
    return F.cross_entropy(logits, labels.long())


def approx_loss(
    student: Sequence[torch.Tensor],
    teacher: Sequence[torch.Tensor],
    masks: Sequence[torch.Tensor],
) -> torch.Tensor:
    """Squared error of approximated frozen tokens against the teacher.

    For each sample and stage: sum over frozen patch rows of ||x' − x||²
    (summed over D), divided by that sample's frozen count. A sample-stage
    without frozen tokens contributes 0. The result is the mean over batch
    and stages.

    Args:
        student: Per-stage approximated tokens [B, N+1, D]
        teacher: Per-stage teacher tokens at the same boundaries
        masks: Per-stage keep bits [B, N]

    Returns:
        Scalar loss
    """
    if not (len(student) == len(teacher) == len(masks)):
        raise ContractViolation("approx_loss needs one student, teacher and mask per stage")
    if not student:
        return torch.zeros(())
    terms = []
    for x_student, x_teacher, bits in zip(student, teacher, masks):
        if x_student.shape != x_teacher.shape:
            raise ContractViolation(
                f"student {tuple(x_student.shape)} and teacher {tuple(x_teacher.shape)} differ"
            )
        frozen = 1 - bits.detach()
        sq = ((x_student[:, 1:] - x_teacher[:, 1:]) ** 2).sum(dim=-1)
        count = frozen.sum(dim=-1)
        per_sample = (sq * frozen).sum(dim=-1) / count.clamp_min(1)
        terms.append(torch.where(count > 0, per_sample, torch.zeros_like(per_sample)))
    return torch.stack(terms).mean()


def total_loss(
    cls: torch.Tensor,
    apr: torch.Tensor,
    flops: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """λ_cls·L_cls + λ_apr·L_apr + λ_FLOPs·L_FLOPs."""
    for name, value in (("cls", cls), ("apr", apr), ("flops", flops)):
        if not math.isfinite(float(value)):
            raise NumericError(f"{name} loss is not finite")
    return weights.lambda_cls * cls + weights.lambda_apr * apr + weights.lambda_flops * flops
