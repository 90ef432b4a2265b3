"""Training: the masked (batch-rectangular) ToFe forward, teacher caching,
keep-count tracking and the backbone / ToFe optimisation loops.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import torch
from tqdm import tqdm

from app.core import flops as flops_model
from app.core import tensor_ops as ops
from app.core.errors import ConfigError
from app.core.storage import append_jsonl
from app.core.tensor_ops import Rng
from app.models.config import LossWeights, StagePlan, TrainConfig
from app.models.reports import AvgKeepCounts, TrainingRecord
from app.services.backbone import Block, VisionTransformer
from app.services.dataset import ShapesDataset, iter_batches
from app.services.losses import approx_loss, cls_loss, total_loss
from app.services.metrics import MetricsCollector
from app.services.tofe_modules import DecisionMask, ToFeModel, gumbel_hard_mask, selector_scores

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Masked training form
# ---------------------------------------------------------------------------

def masked_attention(block: Block, x: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """One block over full-length tokens where frozen columns are hidden.

    Row i sees column j when i == j or j is kept; the [CLS] column is always
    visible. LN, residuals and MLP run on every row.
    """
    gate = torch.cat([torch.ones_like(bits[:, :1]), bits], dim=1)
    return block(x, gate)


@dataclass
class StageOutputs:
    """Result of ``masked_stage_forward``.

    approximations[s] holds X + ΔX at the end of stage s (s < S−1); its
    patch rows that were frozen in stage s are what the approximation loss
    compares with the teacher.
    """

    logits: torch.Tensor
    tokens: torch.Tensor
    decisions: List[DecisionMask]
    approximations: List[torch.Tensor] = field(default_factory=list)
    block_outputs: List[torch.Tensor] = field(default_factory=list)

    def soft_counts(self) -> torch.Tensor:
        """[B, S] expected kept counts."""
        return torch.stack([d.soft.sum(dim=-1) for d in self.decisions], dim=1)

    def hard_counts(self) -> torch.Tensor:
        return torch.stack([d.keep_counts() for d in self.decisions], dim=1)


def masked_stage_forward(
    model: ToFeModel,
    images: torch.Tensor,
    rng: Optional[Rng] = None,
    temperature: float = 1.0,
    mode: str = "train",
    masks: Optional[Sequence[torch.Tensor]] = None,
    capture: bool = False,
) -> StageOutputs:
    """Differentiable ToFe forward keeping every tensor at N+1 rows.

    Per stage: selector decision, the stage's blocks with masked attention,
    then X ← M⊙Blocks(X) + (1−M)⊙(X + ΔX). The last stage has no
    approximator, so its frozen rows keep their stage-input value.

    Args:
        model: Backbone with selectors and approximators
        images: [B, C, H, W]
        rng: Gumbel stream for train mode
        temperature: Gumbel-softmax temperature
        mode: ``train`` samples masks, ``infer`` takes the argmax
        masks: Optional fixed per-stage keep bits [B, N] overriding the selectors
        capture: Keep every block's output; inside a stage, frozen rows hold
            their stage-input value
    """
    plan = model.plan
    x = model.backbone.embed(images)
    captured: List[torch.Tensor] = []
    for block in model.prefix_blocks():
        x = block(x)
        if capture:
            captured.append(x)

    decisions: List[DecisionMask] = []
    approximations: List[torch.Tensor] = []
    previous: Optional[torch.Tensor] = None
    for stage in range(plan.num_stages):
        z = selector_scores(model.selectors[stage], x[:, 1:])
        if masks is not None:
            decision = DecisionMask(bits=masks[stage].to(x.dtype), soft=z[..., 0])
        else:
            decision = gumbel_hard_mask(z, rng, temperature, mode)
        if not plan.reuse_tokens and previous is not None:
            decision = DecisionMask(bits=decision.bits * previous, soft=decision.soft * previous.detach())
        decisions.append(decision)
        previous = decision.bits

        keep = torch.cat([torch.ones_like(decision.bits[:, :1]), decision.bits], dim=1).unsqueeze(-1)
        y = x
        for block in model.stage_blocks(stage):
            y = masked_attention(block, y, decision.bits)
            if capture:
                captured.append(keep * y + (1 - keep) * x)

        if stage < plan.num_approximators:
            approx = ops.add(x, model.approximators[stage](x))
            approximations.append(approx)
            x = keep * y + (1 - keep) * approx
        else:
            x = keep * y + (1 - keep) * x

    return StageOutputs(
        logits=model.backbone.classify(x),
        tokens=x,
        decisions=decisions,
        approximations=approximations,
        block_outputs=captured,
    )


@dataclass
class TeacherCache:
    """Teacher tokens at every approximator boundary for one batch."""

    boundaries: List[torch.Tensor]

    @classmethod
    def capture(cls, teacher: VisionTransformer, images: torch.Tensor, plan: StagePlan) -> "TeacherCache":
        with torch.no_grad():
            _, outputs = teacher.forward_features(images, capture=True)
        return cls([outputs[plan.stage_end(stage) - 1] for stage in range(plan.num_approximators)])


class KeepCountTracker:
    """Exponential moving average of kept patch tokens per stage."""

    def __init__(self, num_stages: int, num_patches: int, decay: float = 0.99):
        self.num_patches = num_patches
        self.decay = decay
        self.running: Optional[List[float]] = None
        self.num_stages = num_stages

    def update(self, batch_means: Sequence[float]) -> None:
        if len(batch_means) != self.num_stages:
            raise ConfigError(f"expected {self.num_stages} stage counts, got {len(batch_means)}")
        if self.running is None:
            self.running = [float(v) for v in batch_means]
            return
        self.running = [self.decay * r + (1 - self.decay) * float(v) for r, v in zip(self.running, batch_means)]

    def snapshot(self) -> AvgKeepCounts:
        """Running means plus counts rounded half-up and clamped to [1, N]."""
        running = self.running if self.running is not None else [float(self.num_patches)] * self.num_stages
        counts = [min(self.num_patches, max(1, int(math.floor(r + 0.5)))) for r in running]
        return AvgKeepCounts(running=running, counts=counts)


# ---------------------------------------------------------------------------
# Optimisation loops
# ---------------------------------------------------------------------------

def _optimizer(params, config: TrainConfig, steps: int):
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, steps), eta_min=config.lr_final)
    return optimizer, scheduler


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=-1) == labels).float().mean().item())


class _Loop:
    """Shared epoch bookkeeping for both trainers."""

    phase = "backbone"

    def __init__(
        self,
        config: TrainConfig,
        dtype: torch.dtype = torch.float32,
        log_path: Optional[Path] = None,
        metrics: Optional[MetricsCollector] = None,
        progress: bool = False,
    ):
        self.config = config
        self.dtype = dtype
        self.log_path = Path(log_path) if log_path is not None else None
        self.metrics = metrics
        self.progress = progress
        self.records: List[TrainingRecord] = []

    def _batches(self, data: ShapesDataset, rng: Rng, epoch: int):
        batches = iter_batches(data, self.config.batch_size, rng, self.dtype)
        total = math.ceil(len(data) / self.config.batch_size)
        return tqdm(batches, total=total, desc=f"{self.phase} epoch {epoch + 1}", disable=not self.progress, leave=False)

    def _emit(self, record: TrainingRecord) -> None:
        self.records.append(record)
        logger.info(f"{self.phase} epoch complete", extra=record.model_dump())
        if self.log_path is not None:
            append_jsonl(self.log_path, record)
        if self.metrics is not None:
            self.metrics.track_epoch(record)


class BackboneTrainer(_Loop):
    """Pretrains the plain ViT with cross-entropy."""

    phase = "backbone"

    def fit(
        self,
        backbone: VisionTransformer,
        train: ShapesDataset,
        evaluation: Optional[ShapesDataset] = None,
    ) -> List[TrainingRecord]:
        rng = Rng(self.config.seed).child(10)
        steps = self.config.epochs * math.ceil(len(train) / self.config.batch_size)
        optimizer, scheduler = _optimizer(backbone.parameters(), self.config, steps)
        step = 0
        for epoch in range(self.config.epochs):
            backbone.train()
            loss_sum, correct, seen = 0.0, 0.0, 0
            for images, labels in self._batches(train, rng.child(epoch), epoch):
                logits = backbone(images)
                loss = cls_loss(logits, labels)
                optimizer.zero_grad()
                ops.backward(loss)
                optimizer.step()
                scheduler.step()
                step += 1
                loss_sum += float(loss) * len(labels)
                correct += _accuracy(logits, labels) * len(labels)
                seen += len(labels)
                if self.metrics is not None:
                    self.metrics.track_step(self.phase)
            eval_acc = evaluate_accuracy(backbone, evaluation, self.config.batch_size, self.dtype) if evaluation is not None else None
            self._emit(TrainingRecord(
                phase=self.phase,
                epoch=epoch + 1,
                step=step,
                lr=scheduler.get_last_lr()[0],
                loss_total=loss_sum / seen,
                loss_cls=loss_sum / seen,
                train_accuracy=correct / seen,
                eval_accuracy=eval_acc,
            ))
        return self.records


@dataclass
class ToFeResult:
    avg_counts: AvgKeepCounts
    records: List[TrainingRecord]


class ToFeTrainer(_Loop):
    """Joint fine-tune of selectors, approximators and backbone under a budget.

    The teacher is a frozen copy of the backbone as passed in. The backbone
    itself is frozen for the first ``warmup_epochs_frozen_backbone`` epochs.
    """

    phase = "tofe"

    def __init__(self, model: ToFeModel, config: TrainConfig, weights: LossWeights, **kwargs):
        super().__init__(config, **kwargs)
        if config.target_flops is None:
            raise ConfigError("ToFe training needs a FLOPs target")
        floor = flops_model.cls_floor_flops(model.cfg, model.plan)
        if config.target_flops <= floor:
            raise ConfigError(f"target {config.target_flops:.4g} FLOPs is not above the [CLS]-only floor {floor:.4g}")
        self.model = model
        self.weights = weights
        self.teacher = copy.deepcopy(model.backbone).eval()
        for param in self.teacher.parameters():
            param.requires_grad_(False)
        self.scale = float(flops_model.baseline_flops(model.cfg))
        self.tracker = KeepCountTracker(model.plan.num_stages, model.cfg.num_patches, config.keep_count_decay)

    def train_step(self, images: torch.Tensor, labels: torch.Tensor, rng: Rng, optimizer) -> dict:
        """One optimisation step; returns the scalar components."""
        model, cfg, plan = self.model, self.model.cfg, self.model.plan
        out = masked_stage_forward(model, images, rng, self.config.temperature, mode="train")
        teacher = TeacherCache.capture(self.teacher, images, plan)

        l_cls = cls_loss(out.logits, labels)
        l_apr = approx_loss(
            out.approximations, teacher.boundaries, [d.bits for d in out.decisions[:plan.num_approximators]]
        ).to(l_cls.dtype)
        soft_flops = flops_model.flops_from_counts(out.soft_counts(), cfg, plan)
        l_flops = flops_model.budget_loss(soft_flops, self.config.target_flops, scale=self.scale)
        loss = total_loss(l_cls, l_apr, l_flops, self.weights)

        optimizer.zero_grad()
        ops.backward(loss)
        optimizer.step()

        hard = out.hard_counts()
        self.tracker.update(hard.mean(dim=0).tolist())
        return {
            "loss": float(loss),
            "cls": float(l_cls),
            "apr": float(l_apr),
            "flops": float(l_flops),
            "gflops": float(flops_model.flops_from_counts(hard, cfg, plan).mean()) / 1e9,
            "keep": hard.mean(dim=0).tolist(),
            "accuracy": _accuracy(out.logits, labels),
        }

    def fit(self, train: ShapesDataset, evaluation: Optional[ShapesDataset] = None) -> ToFeResult:
        model, config = self.model, self.config
        root = Rng(config.seed)
        data_rng, gumbel_rng = root.child(20), root.child(21)
        steps = config.epochs * math.ceil(len(train) / config.batch_size)
        optimizer, scheduler = _optimizer(model.parameters(), config, steps)
        step = 0
        for epoch in range(config.epochs):
            model.set_backbone_trainable(epoch >= config.warmup_epochs_frozen_backbone)
            model.train()
            totals = {"loss": 0.0, "cls": 0.0, "apr": 0.0, "flops": 0.0, "gflops": 0.0, "accuracy": 0.0}
            keep = [0.0] * model.plan.num_stages
            seen = 0
            for images, labels in self._batches(train, data_rng.child(epoch), epoch):
                stats = self.train_step(images, labels, gumbel_rng, optimizer)
                scheduler.step()
                step += 1
                n = len(labels)
                seen += n
                for key in totals:
                    totals[key] += stats[key] * n
                keep = [k + s * n for k, s in zip(keep, stats["keep"])]
                if self.metrics is not None:
                    self.metrics.track_step(self.phase)
            eval_acc = None
            if evaluation is not None:
                eval_acc = evaluate_accuracy(model, evaluation, config.batch_size, self.dtype)
            self._emit(TrainingRecord(
                phase=self.phase,
                epoch=epoch + 1,
                step=step,
                lr=scheduler.get_last_lr()[0],
                loss_total=totals["loss"] / seen,
                loss_cls=totals["cls"] / seen,
                loss_apr=totals["apr"] / seen,
                loss_flops=totals["flops"] / seen,
                batch_gflops=totals["gflops"] / seen,
                keep_counts=[k / seen for k in keep],
                train_accuracy=totals["accuracy"] / seen,
                eval_accuracy=eval_acc,
            ))
        model.set_backbone_trainable(True)
        model.eval()
        return ToFeResult(avg_counts=self.tracker.snapshot(), records=self.records)


def evaluate_accuracy(
    model: torch.nn.Module,
    data: ShapesDataset,
    batch_size: int,
    dtype: torch.dtype = torch.float32,
) -> float:
    """Held-out top-1 (fraction); ToFe models use argmax masks."""
    was_training = model.training
    model.eval()
    correct = 0.0
    with torch.no_grad():
        for images, labels in iter_batches(data, batch_size, None, dtype):
            if isinstance(model, ToFeModel):
                logits = masked_stage_forward(model, images, mode="infer").logits
            else:
                logits = model(images)
            correct += _accuracy(logits, labels) * len(labels)
    model.train(was_training)
    return correct / max(1, len(data))
