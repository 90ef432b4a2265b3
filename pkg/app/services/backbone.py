"""Vision transformer backbone.

Patch embedding, learnable [CLS] and position encodings, ``depth`` pre-norm
blocks and a linear head on the [CLS] row. Attention accepts an optional
per-column gate so the same block serves both the plain forward and the
masked training form of token freezing.
"""

import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from app.core import tensor_ops as ops
from app.core.errors import ShapeError
from app.core.tensor_ops import Rng
from app.models.config import ModelConfig

logger = logging.getLogger(__name__)


def init_linear(layer: nn.Linear, rng: Rng) -> None:
    """Uniform init scaled by fan-in; zero bias."""
    bound = layer.in_features ** -0.5
    with torch.no_grad():
        layer.weight.copy_(rng.uniform(tuple(layer.weight.shape), -bound, bound, layer.weight.dtype))
        if layer.bias is not None:
            layer.bias.zero_()


class Attention(nn.Module):
    """Multi-head self-attention, Softmax(QKᵀ/√D_h)·V per head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.scale = cfg.head_dim ** -0.5
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, x: torch.Tensor, gate: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attend over the token rows of ``x`` ([B, n, D]).

        Args:
            x: Token features
            gate: Optional [B, n] column gate; column j is visible to row i
                when i == j or gate[j] == 1

        Returns:
            Output-projected attention result, same shape as ``x``
        """
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d", three=3, h=self.num_heads)
        scores = ops.matmul(q, ops.transpose(k)) * self.scale
        mask = None
        if gate is not None:
            eye = torch.eye(x.shape[-2], dtype=x.dtype, device=x.device)
            columns = gate[:, None, None, :]
            mask = columns + (1 - columns) * eye
        weights = ops.softmax_rows(scores, mask)
        out = rearrange(ops.matmul(weights, v), "b h n d -> b n (h d)")
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(nn.Module):
    """x + MHSA(LN(x)), then + MLP(LN(x))."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.eps = cfg.ln_eps
        self.norm1 = nn.LayerNorm(cfg.embed_dim, eps=cfg.ln_eps)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, eps=cfg.ln_eps)
        self.mlp = Mlp(cfg)

    def forward(self, x: torch.Tensor, gate: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = ops.add(x, self.attn(ops.layer_norm(x, self.norm1.weight, self.norm1.bias, self.eps), gate))
        return ops.add(x, self.mlp(ops.layer_norm(x, self.norm2.weight, self.norm2.bias, self.eps)))


class VisionTransformer(nn.Module):
    """Plain ViT classifier reading the [CLS] row."""

    def __init__(self, cfg: ModelConfig, rng: Optional[Rng] = None):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.ln_eps)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        if rng is not None:
            self.init_weights(rng)

    def init_weights(self, rng: Rng) -> None:
        """Deterministic init: every Linear draws from its own child stream."""
        linears = [m for m in self.modules() if isinstance(m, nn.Linear)]
        for key, layer in enumerate(linears):
            init_linear(layer, rng.child(key))
        embed_rng = rng.child(len(linears))
        with torch.no_grad():
            self.cls_token.copy_(embed_rng.normal(tuple(self.cls_token.shape), 0.02, self.cls_token.dtype))
            self.pos_embed.copy_(embed_rng.normal(tuple(self.pos_embed.shape), 0.02, self.pos_embed.dtype))
        logger.debug("Initialised backbone", extra={"seed": rng.seed, "parameters": count_parameters(self)})

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Images [B, C, H, W] (or a single [C, H, W]) to tokens [B, N+1, D]."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape [B, {expected}], got {tuple(images.shape)}")
        patches = rearrange(
            images, "b c (gh p1) (gw p2) -> b (gh gw) (p1 p2 c)", p1=cfg.patch_size, p2=cfg.patch_size
        )
        tokens = self.patch_embed(patches.to(self.patch_embed.weight.dtype))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return ops.add(ops.concat_rows([cls, tokens]), self.pos_embed)

    def classify(self, tokens: torch.Tensor) -> torch.Tensor:
        """Final LN and head on the [CLS] row."""
        cls = ops.layer_norm(tokens[:, 0], self.norm.weight, self.norm.bias, self.cfg.ln_eps)
        return self.head(cls)

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return self.classify(tokens)

    def forward_features(
        self, images: torch.Tensor, capture: bool = False
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Run every block, optionally keeping each block's output tokens."""
        x = self.embed(images)
        outputs = []
        for block in self.blocks:
            x = block(x)
            if capture:
                outputs.append(x)
        return x, outputs

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_tokens(self.embed(images))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def backbone_param_count(cfg: ModelConfig) -> int:
    """Parameter count of ``VisionTransformer(cfg)`` from the geometry alone."""
    d, h = cfg.embed_dim, cfg.hidden_dim
    block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    embed = cfg.patch_dim * d + d + d + cfg.num_tokens * d
    head = 2 * d + d * cfg.num_classes + cfg.num_classes
    return embed + cfg.depth * block + head
