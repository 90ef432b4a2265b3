"""Token selector, token approximator and the partition/rearrange bookkeeping."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
from einops import rearrange

from app.core import tensor_ops as ops
from app.core.errors import ContractViolation, ShapeError
from app.core.tensor_ops import Rng
from app.models.config import ModelConfig, StagePlan
from app.services.backbone import Block, VisionTransformer, init_linear

logger = logging.getLogger(__name__)

KEEP, FREEZE = 0, 1


class TokenSelector(nn.Module):
    """LN, then Linear(D→D/2), GELU, Linear(D/2→D/4), GELU, Linear(D/4→2)."""

    def __init__(self, embed_dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.norm = nn.LayerNorm(embed_dim, eps=eps)
        self.fc1 = nn.Linear(embed_dim, embed_dim // 2)
        self.fc2 = nn.Linear(embed_dim // 2, embed_dim // 4)
        self.fc3 = nn.Linear(embed_dim // 4, 2)

    def _head(self, x: torch.Tensor) -> torch.Tensor:
        x = ops.gelu(self.fc1(x))
        x = ops.gelu(self.fc2(x))
        return self.fc3(x)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self._head(ops.layer_norm(patches, self.norm.weight, self.norm.bias, self.eps))


class LocalGlobalSelector(TokenSelector):
    """Selector that sees each token next to a summary of the whole image.

    After LN and Linear(D→D) + GELU, the first D/2 channels stay per-token and
    the remaining channels are averaged over the image's patch tokens. The
    concatenation feeds the same three-layer head as ``TokenSelector``.
    """

    def __init__(self, embed_dim: int, eps: float = 1e-6):
        super().__init__(embed_dim, eps)
        self.fc0 = nn.Linear(embed_dim, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = ops.layer_norm(patches, self.norm.weight, self.norm.bias, self.eps)
        x = ops.gelu(self.fc0(x))
        split = x.shape[-1] // 2
        local = x[..., :split]
        pooled = x[..., split:].mean(dim=-2, keepdim=True).expand(-1, x.shape[-2], -1)
        return self._head(torch.cat([local, pooled], dim=-1))


def build_selector(kind: str, embed_dim: int, eps: float = 1e-6) -> TokenSelector:
    if kind == "mlp":
        return TokenSelector(embed_dim, eps)
    if kind == "local_global":
        return LocalGlobalSelector(embed_dim, eps)
    raise ContractViolation(f"unknown selector kind: {kind}")


class TokenApproximator(nn.Module):
    """Residual branch ΔX applied to frozen tokens.

    ``bottleneck``: LN, Linear(D→D/4), GELU, Linear(D/4→D), row-wise.
    ``identity``: ΔX is zero and the module has no parameters.
    ``dwconv``: LN, then a 3×3 depth-wise convolution over the patch grid;
    ΔX of [CLS] is zero.
    ``block``: one transformer block, ΔX = Block(X) − X.

    The last two mix rows, so they take the full stage-input token tensor
    and need ``cfg`` for the grid and block geometry.
    """

    ROW_WISE = ("bottleneck", "identity")
    KINDS = ROW_WISE + ("dwconv", "block")

    def __init__(
        self,
        embed_dim: int,
        kind: str = "bottleneck",
        eps: float = 1e-6,
        cfg: Optional[ModelConfig] = None,
    ):
        super().__init__()
        self.kind = kind
        self.eps = eps
        if kind not in self.KINDS:
            raise ContractViolation(f"unknown approximator kind: {kind}")
        if kind not in self.ROW_WISE and cfg is None:
            raise ContractViolation(f"a {kind} approximator needs the model config")
        if kind == "bottleneck":
            self.norm = nn.LayerNorm(embed_dim, eps=eps)
            self.fc1 = nn.Linear(embed_dim, embed_dim // 4)
            self.fc2 = nn.Linear(embed_dim // 4, embed_dim)
        elif kind == "dwconv":
            self.grid = cfg.grid_size
            self.norm = nn.LayerNorm(embed_dim, eps=eps)
            self.conv = nn.Conv2d(embed_dim, embed_dim, kernel_size=3, padding=1, groups=embed_dim)
        elif kind == "block":
            self.block = Block(cfg)

    @property
    def row_wise(self) -> bool:
        return self.kind in self.ROW_WISE

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.kind == "identity":
            return torch.zeros_like(tokens)
        if self.kind == "block":
            return self.block(tokens) - tokens
        x = ops.layer_norm(tokens, self.norm.weight, self.norm.bias, self.eps)
        if self.kind == "bottleneck":
            return self.fc2(ops.gelu(self.fc1(x)))
        if tokens.shape[-2] != self.grid * self.grid + 1:
            raise ShapeError(
                f"dwconv approximator needs all {self.grid * self.grid + 1} token rows, got {tokens.shape[-2]}"
            )
        grid = rearrange(x[:, 1:], "b (h w) d -> b d h w", h=self.grid)
        delta = rearrange(self.conv(grid), "b d h w -> b (h w) d")
        return ops.concat_rows([torch.zeros_like(tokens[:, :1]), delta])


@dataclass
class DecisionMask:
    """Per-stage keep decision over patch tokens ([CLS] excluded).

    bits: [B, N] values in {0, 1}; in train mode they carry the
        straight-through gradient of the relaxed sample
    soft: [B, N] keep-class probabilities from the selector
    """

    bits: torch.Tensor
    soft: torch.Tensor

    @property
    def hard(self) -> torch.Tensor:
        return self.bits.detach()

    def keep_counts(self) -> torch.Tensor:
        return self.hard.sum(dim=-1)


@dataclass
class Partition:
    """Kept and frozen rows of a token tensor.

    Index lists are row indices into the (N+1)-row tensor, so patch i
    (0-based) sits at row i + 1 and [CLS] at row 0.
    """

    kept: torch.Tensor
    frozen: torch.Tensor
    kept_idx: torch.Tensor
    frozen_idx: torch.Tensor


def selector_scores(selector: TokenSelector, patches: torch.Tensor) -> torch.Tensor:
    """Row-wise (p_keep, p_freeze) for patch tokens [B, N, D] → [B, N, 2]."""
    return ops.softmax_rows(selector(patches))


def gumbel_hard_mask(
    z: torch.Tensor,
    rng: Optional[Rng] = None,
    temperature: float = 1.0,
    mode: str = "train",
) -> DecisionMask:
    """Binary keep mask from selector probabilities.

    ``infer`` takes the argmax of ``z`` (ties keep). ``train`` draws a
    Gumbel-softmax sample at ``temperature``; the forward value is the
    one-hot argmax and the backward pass uses the relaxed sample.
    """
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    soft = z[..., KEEP]
    if mode == "infer":
        return DecisionMask(bits=(z[..., KEEP] >= z[..., FREEZE]).to(z.dtype), soft=soft)
    if mode != "train":
        raise ContractViolation(f"unknown mask mode: {mode}")
    if rng is None:
        raise ContractViolation("train-mode masks need an Rng")
    log_z = torch.log(z.clamp_min(torch.finfo(z.dtype).tiny))
    noise = ops.gumbel_noise(rng, tuple(z.shape), z.dtype).to(z.device)
    y = ops.softmax_rows((log_z + noise) / temperature)
    hard = (y[..., KEEP] >= y[..., FREEZE]).to(z.dtype)
    relaxed = y[..., KEEP]
    # exact 0/1 forward; gradient of the relaxed sample
    bits = hard + (relaxed - relaxed.detach())
    return DecisionMask(bits=bits, soft=soft)


def partition_tokens(x: torch.Tensor, bits: torch.Tensor) -> Partition:
    """Split [B, N+1, D] tokens into [CLS]+kept rows and frozen rows.

    Original order is preserved on both sides. Every batch row must keep
    the same number of tokens so the result stays rectangular.
    """
    hard = bits.detach()
    counts = hard.sum(dim=-1)
    if counts.numel() and bool((counts != counts.reshape(-1)[0]).any()):
        raise ContractViolation("partition_tokens needs equal kept counts across the batch")
    kept_count = int(counts.reshape(-1)[0].item()) if counts.numel() else 0
    order = torch.argsort(1 - hard, dim=-1, stable=True)
    kept_idx = order[..., :kept_count] + 1
    frozen_idx = order[..., kept_count:] + 1
    kept = ops.concat_rows([x[:, :1], ops.gather_rows(x, kept_idx)])
    return Partition(kept=kept, frozen=ops.gather_rows(x, frozen_idx), kept_idx=kept_idx, frozen_idx=frozen_idx)


def approximate_frozen(approximator: TokenApproximator, frozen: torch.Tensor) -> torch.Tensor:
    """frozen + ΔX(frozen), row-wise; an empty input comes back empty."""
    if frozen.shape[-2] == 0:
        return frozen
    return ops.add(frozen, approximator(frozen))


def approximate_in_context(
    approximator: TokenApproximator, tokens: torch.Tensor, frozen_idx: torch.Tensor
) -> torch.Tensor:
    """Rows ``frozen_idx`` of tokens + ΔX(tokens) for approximators that mix rows.

    ``tokens`` is the full [B, N+1, D] stage input, the same tensor the
    masked form hands the approximator.
    """
    if frozen_idx.shape[-1] == 0:
        return ops.gather_rows(tokens, frozen_idx)
    return ops.gather_rows(ops.add(tokens, approximator(tokens)), frozen_idx)


def rearrange_tokens(
    processed_kept: torch.Tensor,
    approx_frozen: torch.Tensor,
    kept_idx: torch.Tensor,
    frozen_idx: torch.Tensor,
) -> torch.Tensor:
    """Scatter [CLS]+kept and frozen rows back into original positional order."""
    rows = processed_kept.shape[-2] + approx_frozen.shape[-2]
    if kept_idx.shape[-1] + 1 != processed_kept.shape[-2] or frozen_idx.shape[-1] != approx_frozen.shape[-2]:
        raise ContractViolation("index lists do not match the row counts they describe")
    cls_idx = torch.zeros(*kept_idx.shape[:-1], 1, dtype=torch.long, device=kept_idx.device)
    all_idx = torch.cat([cls_idx, kept_idx, frozen_idx], dim=-1)
    if int(all_idx.min()) < 0 or int(all_idx.max()) >= rows:
        raise ContractViolation("index lists do not partition the token rows")
    source = ops.concat_rows([processed_kept, approx_frozen])
    return ops.scatter_rows(torch.zeros_like(source), all_idx, source)


def tie_break_top_n(scores: torch.Tensor, count: int) -> torch.Tensor:
    """0-based positions of the ``count`` highest scores, ascending.

    Equal scores favour the lower position.
    """
    n = scores.shape[-1]
    if not 1 <= count <= n:
        raise ContractViolation(f"top-n count {count} outside 1..{n}")
    order = torch.argsort(-scores, dim=-1, stable=True)
    return torch.sort(order[..., :count], dim=-1).values


def bias_selector_keep_all(selector: TokenSelector, margin: float = 10.0) -> None:
    """Make the selector keep every token regardless of input."""
    with torch.no_grad():
        selector.fc3.weight.zero_()
        selector.fc3.bias.copy_(torch.tensor([margin, -margin], dtype=selector.fc3.bias.dtype))


class ToFeModel(nn.Module):
    """Backbone plus S selectors and S−1 approximators."""

    def __init__(self, backbone: VisionTransformer, plan: StagePlan, rng: Optional[Rng] = None):
        super().__init__()
        cfg = backbone.cfg
        if plan.depth != cfg.depth:
            raise ContractViolation(f"stage plan depth {plan.depth} != backbone depth {cfg.depth}")
        self.backbone = backbone
        self.plan = plan
        self.selectors = nn.ModuleList(
            [build_selector(plan.selector, cfg.embed_dim, cfg.ln_eps) for _ in range(plan.num_stages)]
        )
        self.approximators = nn.ModuleList(
            [TokenApproximator(cfg.embed_dim, plan.approximator, cfg.ln_eps, cfg) for _ in range(plan.num_approximators)]
        )
        if rng is not None:
            self.init_modules(rng)

    @property
    def cfg(self) -> ModelConfig:
        return self.backbone.cfg

    def init_modules(self, rng: Rng) -> None:
        """Fan-in init for selector/approximator layers.

        Approximator output layers start at zero so ΔX begins at zero for every kind.
        """
        layers = [m for module in (self.selectors, self.approximators) for m in module.modules() if isinstance(m, nn.Linear)]
        for key, layer in enumerate(layers):
            init_linear(layer, rng.child(key))
        with torch.no_grad():
            for approximator in self.approximators:
                if approximator.kind == "bottleneck":
                    approximator.fc2.weight.zero_()
                elif approximator.kind == "dwconv":
                    approximator.conv.weight.zero_()
                    approximator.conv.bias.zero_()
                elif approximator.kind == "block":
                    approximator.block.attn.proj.weight.zero_()
                    approximator.block.mlp.fc2.weight.zero_()

    def stage_blocks(self, stage: int) -> List[nn.Module]:
        return list(self.backbone.blocks[self.plan.stage_start(stage):self.plan.stage_end(stage)])

    def prefix_blocks(self) -> List[nn.Module]:
        """Blocks that run before the first selector."""
        return list(self.backbone.blocks[:self.plan.stage_start(0)])

    def set_backbone_trainable(self, trainable: bool) -> None:
        for param in self.backbone.parameters():
            param.requires_grad_(trainable)

    def module_parameters(self) -> List[nn.Parameter]:
        return list(self.selectors.parameters()) + list(self.approximators.parameters())
