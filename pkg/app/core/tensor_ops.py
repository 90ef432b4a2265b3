"""Tensor primitives shared by the backbone, ToFe modules and training.

Tensors are plain ``torch.Tensor`` values (dense, row-major, taped for
reverse-mode differentiation). This module adds what the rest of the
package relies on beyond stock torch:

- contract checks with toolkit error types (shape, index, uniqueness)
- a counter-based seeded generator with explicit state threading
- a numerically stabilised row softmax that accepts a multiplicative
  attention mask and stays bit-identical to the unmasked path for an
  all-ones mask
- opt-in NaN/Inf assertions after every op
"""

import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.core.errors import ContractViolation, NumericError, ShapeError, TokenIndexError

logger = logging.getLogger(__name__)

Shape = Union[int, Sequence[int]]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_debug_checks = False


def resolve_dtype(precision: str) -> torch.dtype:
    """Map a precision name (``float32``/``float64``) to a torch dtype."""
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ContractViolation(f"unsupported precision: {precision}") from None


def set_debug_checks(enabled: bool) -> None:
    """Turn the per-op finite-value assertion on or off."""
    global _debug_checks
    _debug_checks = enabled
    logger.debug("Tensor debug checks %s", "enabled" if enabled else "disabled")


def check_finite(tensor: torch.Tensor, op: str) -> torch.Tensor:
    """Raise NumericError if ``tensor`` holds NaN or Inf."""
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError(f"non-finite values produced by {op}")
    return tensor


def _checked(tensor: torch.Tensor, op: str) -> torch.Tensor:
    if _debug_checks:
        check_finite(tensor, op)
    return tensor


class Rng:
    """Seeded Philox stream.

    Identical seed and call sequence give identical output. Components get
    their own stream through ``child`` instead of sharing one.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        return Rng(self.seed, self.key + (int(key),))

    def uniform(
        self,
        shape: Shape,
        low: float = 0.0,
        high: float = 1.0,
        dtype: torch.dtype = torch.float32,
    ) -> torch.Tensor:
        return torch.from_numpy(self.generator.uniform(low, high, size=shape)).to(dtype)

    def normal(self, shape: Shape, std: float = 1.0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.generator.normal(0.0, std, size=shape)).to(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def gumbel_noise(rng: Rng, shape: Shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """I.i.d. Gumbel(0, 1) samples ``-log(-log(u))``.

    ``u`` is clamped into the open interval (0, 1) so every sample is finite.
    """
    u = rng.generator.random(size=shape)
    u = np.clip(u, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0))
    return torch.from_numpy(-np.log(-np.log(u))).to(dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two dimensions (leading dims batch)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return _checked(a @ b, "matmul")


def softmax_rows(x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the last dimension, stabilised by the row maximum.

    With ``mask`` the result is ``exp(x)·mask / Σ exp(x)·mask``; the row
    maximum is then taken over columns where the mask is nonzero, so every
    row needs at least one such column. An all-ones mask reproduces the
    unmasked result bit for bit.
    """
    if mask is None:
        shift = x.amax(dim=-1, keepdim=True).detach()
        weights = torch.exp(x - shift)
    else:
        allowed = mask != 0
        shift = x.masked_fill(~allowed, float("-inf")).amax(dim=-1, keepdim=True).detach()
        # blocked columns may exceed the allowed maximum; keep exp() bounded there
        weights = torch.exp((x - shift).clamp(max=0.0)) * mask
    return _checked(weights / weights.sum(dim=-1, keepdim=True), "softmax_rows")


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    bias: torch.Tensor,
    eps: float = 1e-6,
) -> torch.Tensor:
    """Per-token normalisation over the last dimension followed by an affine map."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm expects gain/bias of shape ({width},), "
            f"got {tuple(gain.shape)} and {tuple(bias.shape)}"
        )
    return _checked(F.layer_norm(x, (width,), gain, bias, eps), "layer_norm")


def _broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}") from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast(a, b, "add")
    return _checked(a + b, "add")


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hadamard product."""
    _broadcast(a, b, "mul")
    return _checked(a * b, "mul")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _checked(F.gelu(x), "gelu")


def relu(x: torch.Tensor) -> torch.Tensor:
    return _checked(F.relu(x), "relu")


def transpose(x: torch.Tensor) -> torch.Tensor:
    """Swap the last two dimensions."""
    if x.dim() < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {tuple(x.shape)}")
    return x.transpose(-2, -1)


def concat_rows(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack row blocks along the token dimension."""
    if not tensors:
        raise ContractViolation("concat_rows needs at least one tensor")
    width = tensors[0].shape[-1]
    for t in tensors:
        if t.shape[-1] != width or t.shape[:-2] != tensors[0].shape[:-2]:
            raise ShapeError(
                f"concat_rows shape mismatch: {[tuple(t.shape) for t in tensors]}"
            )
    return torch.cat(list(tensors), dim=-2)


def _row_index(x: torch.Tensor, indices: torch.Tensor, op: str) -> torch.Tensor:
    if indices.dtype != torch.long:
        indices = indices.long()
    rows = x.shape[-2]
    if indices.numel() > 0 and (int(indices.min()) < 0 or int(indices.max()) >= rows):
        raise TokenIndexError(f"{op}: index out of range for {rows} rows")
    if indices.dim() == 1:
        indices = indices.expand(*x.shape[:-2], indices.shape[0])
    elif indices.shape[:-1] != x.shape[:-2]:
        raise ShapeError(
            f"{op}: index batch shape {tuple(indices.shape)} does not match {tuple(x.shape)}"
        )
    return indices.unsqueeze(-1).expand(*indices.shape, x.shape[-1])


def gather_rows(x: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Select rows ``indices`` (last-but-one dimension), keeping their order."""
    return torch.gather(x, -2, _row_index(x, indices, "gather_rows"))


def scatter_rows(dst: torch.Tensor, indices: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
    """Return a copy of ``dst`` with rows ``indices`` replaced by ``src``.

    Indices must be unique per batch row; scatter then exactly inverts
    ``gather_rows`` over the same indices.
    """
    if indices.shape[-1] != src.shape[-2]:
        raise ShapeError(
            f"scatter_rows: {indices.shape[-1]} indices for {src.shape[-2]} source rows"
        )
    if indices.numel() > 1:
        ordered = torch.sort(indices, dim=-1).values
        if bool((ordered[..., 1:] == ordered[..., :-1]).any()):
            raise ContractViolation("scatter_rows: duplicate row index")
    return dst.scatter(-2, _row_index(dst, indices, "scatter_rows"), src)


def sum_all(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def backward(loss: torch.Tensor) -> None:
    """Back-propagate a scalar loss into every leaf that requires grad.

    Gradients accumulate across calls until the caller zeroes them.
    """
    if loss.dim() != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    loss.backward()


def gradient_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    rtol: float = 1e-6,
    atol: float = 1e-8,
) -> bool:
    """Compare analytic gradients of ``fn`` against central finite differences.

    Inputs must be float64 leaves with ``requires_grad=True``.
    """
    for t in inputs:
        if t.dtype != torch.float64:
            raise ContractViolation("gradient_check needs float64 inputs")
    return torch.autograd.gradcheck(fn, tuple(inputs), eps=eps, atol=atol, rtol=rtol)
