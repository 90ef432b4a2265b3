"""TOFE checkpoint format.

Layout (little-endian)::

    "TOFE" | version u32 | entry count u32
    entries: name length u32 | UTF-8 name | rank u32 | dims u32 × rank | f32 payload

The last entry is ``__metadata__``: rank 1, its dim the byte length of a
UTF-8 JSON document (CheckpointMeta) stored raw. There is no checksum;
loading validates names and shapes against the requested config.
"""

import logging
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from app.core.errors import BadMagicError, CheckpointConfigError, CheckpointError, VersionMismatchError
from app.core.storage import atomic_write_bytes
from app.models.config import ModelConfig, StagePlan
from app.models.reports import AvgKeepCounts, CheckpointMeta
from app.services.backbone import VisionTransformer
from app.services.tofe_modules import ToFeModel

logger = logging.getLogger(__name__)

MAGIC = b"TOFE"
VERSION = 1
METADATA_KEY = "__metadata__"

_U32 = struct.Struct("<I")

StateDict = Dict[str, torch.Tensor]


def encode_checkpoint(state: StateDict, meta: CheckpointMeta) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state) + 1)]

    def entry(name: str, dims, payload: bytes) -> None:
        raw = name.encode("utf-8")
        parts.extend([_U32.pack(len(raw)), raw, _U32.pack(len(dims))])
        parts.extend(_U32.pack(d) for d in dims)
        parts.append(payload)

    for name, tensor in state.items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        entry(name, array.shape, array.astype("<f4").tobytes())
    blob = meta.model_dump_json().encode("utf-8")
    entry(METADATA_KEY, (len(blob),), blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> Tuple[StateDict, CheckpointMeta]:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise BadMagicError("not a TOFE checkpoint (bad magic)")
    version = reader.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version} is not supported (expected {VERSION})")

    state: StateDict = OrderedDict()
    meta: Optional[CheckpointMeta] = None
    for _ in range(reader.u32("entry count")):
        if meta is not None:
            raise CheckpointError(f"entry after {METADATA_KEY} at byte offset {reader.offset}")
        at = reader.offset
        try:
            name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"entry name at byte offset {at} is not valid UTF-8") from e
        dims = tuple(reader.u32(f"{name} dims") for _ in range(reader.u32(f"{name} rank")))
        if name == METADATA_KEY:
            if len(dims) != 1:
                raise CheckpointError(f"{METADATA_KEY} at byte offset {at} has rank {len(dims)}, expected 1")
            try:
                meta = CheckpointMeta.model_validate_json(reader.take(dims[0], "metadata"))
            except ValueError as e:
                raise CheckpointError(f"unreadable checkpoint metadata: {e}") from e
            continue
        count = math.prod(dims)
        payload = reader.take(4 * count, name)
        state[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims))
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the last entry")
    if meta is None:
        raise CheckpointError("checkpoint has no metadata entry")
    return state, meta


def save_checkpoint(path: Union[str, Path], state: StateDict, meta: CheckpointMeta) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(state, meta))
    logger.info("Saved checkpoint", extra={"path": str(path), "kind": meta.kind, "tensors": len(state)})
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[StateDict, CheckpointMeta]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def read_meta(path: Union[str, Path]) -> CheckpointMeta:
    return load_checkpoint(path)[1]


def _check_config(expected: ModelConfig, found: ModelConfig) -> None:
    for field in ModelConfig.model_fields:
        want, got = getattr(expected, field), getattr(found, field)
        if want != got:
            raise CheckpointConfigError(f"checkpoint {field}={got} does not match config {field}={want}")


def _load_into(module: torch.nn.Module, state: StateDict) -> None:
    own = module.state_dict()
    missing = [name for name in own if name not in state]
    if missing:
        raise CheckpointConfigError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    unexpected = [name for name in state if name not in own]
    if unexpected:
        raise CheckpointConfigError(f"checkpoint has unexpected tensors: {', '.join(unexpected[:5])}")
    for name, tensor in own.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointConfigError(
                f"{name}: checkpoint shape {tuple(state[name].shape)} vs config shape {tuple(tensor.shape)}"
            )
    module.load_state_dict({name: t.to(own[name].dtype) for name, t in state.items()})


# ---------------------------------------------------------------------------
# Model-level helpers
# ---------------------------------------------------------------------------

def save_backbone(path: Union[str, Path], backbone: VisionTransformer) -> Path:
    return save_checkpoint(path, backbone.state_dict(), CheckpointMeta(kind="backbone", model=backbone.cfg))


def save_tofe(path: Union[str, Path], model: ToFeModel, avg_counts: Optional[AvgKeepCounts]) -> Path:
    meta = CheckpointMeta(kind="tofe", model=model.cfg, plan=model.plan, avg_counts=avg_counts)
    return save_checkpoint(path, model.state_dict(), meta)


def load_backbone(
    path: Union[str, Path], cfg: ModelConfig, dtype: torch.dtype = torch.float32
) -> VisionTransformer:
    """Backbone weights from a backbone or ToFe checkpoint."""
    state, meta = load_checkpoint(path)
    _check_config(cfg, meta.model)
    if meta.kind == "tofe":
        state = OrderedDict(
            (name[len("backbone."):], t) for name, t in state.items() if name.startswith("backbone.")
        )
    backbone = VisionTransformer(cfg).to(dtype)
    _load_into(backbone, state)
    return backbone


def load_tofe(
    path: Union[str, Path],
    cfg: ModelConfig,
    plan: Optional[StagePlan] = None,
    dtype: torch.dtype = torch.float32,
) -> Tuple[ToFeModel, Optional[AvgKeepCounts]]:
    """ToFe model and its recorded keep counts.

    Args:
        path: Checkpoint written by ``save_tofe``
        cfg: Expected backbone geometry
        plan: Expected stage plan; None accepts the stored one

    Raises:
        CheckpointConfigError: backbone-only checkpoint or mismatched config/plan
    """
    state, meta = load_checkpoint(path)
    _check_config(cfg, meta.model)
    if meta.kind != "tofe" or meta.plan is None:
        raise CheckpointConfigError(f"{path} holds a {meta.kind} checkpoint without trained selectors")
    if plan is not None and plan != meta.plan:
        raise CheckpointConfigError(f"checkpoint stage plan {meta.plan} does not match config plan {plan}")
    model = ToFeModel(VisionTransformer(cfg), meta.plan).to(dtype)
    _load_into(model, state)
    return model, meta.avg_counts
