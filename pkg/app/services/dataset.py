"""Synthetic shapes dataset: generation, the TOFD file format and batching.

Each image holds one class-defining shape at a random position and scale
plus small distractor dots and pixel noise, so the informative patches are
spatially localised.

File layout (little-endian)::

    "TOFD" | version u32 | count u32 | channels u32 | height u32 | width u32
    count × ( label u16 | channels·height·width f32 )
"""

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from app.core.errors import DataError, DatasetParseError
from app.core.storage import atomic_write_bytes, atomic_write_text
from app.core.tensor_ops import Rng
from app.models.config import DatasetSpec, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"TOFD"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
SPLITS = ("train", "eval")

SHAPE_NAMES = (
    "disc", "square", "triangle", "plus", "ring",
    "diamond", "frame", "cross", "bars", "wedge",
)


@dataclass
class ShapesDataset:
    """Images [n, C, H, W] float32 in [0, 1] and integer labels [n]."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, count: int) -> "ShapesDataset":
        return ShapesDataset(self.images[:count], self.labels[:count])

    def class_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _draw_shape(draw: ImageDraw.ImageDraw, label: int, cx: float, cy: float, r: float, fill: int) -> None:
    w = max(1, int(round(r / 4)))
    box = (cx - r, cy - r, cx + r, cy + r)
    if label == 0:
        draw.ellipse(box, fill=fill)
    elif label == 1:
        s = 0.8 * r
        draw.rectangle((cx - s, cy - s, cx + s, cy + s), fill=fill)
    elif label == 2:
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif label == 3:
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=fill)
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=fill)
    elif label == 4:
        draw.ellipse(box, outline=fill, width=w)
    elif label == 5:
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    elif label == 6:
        draw.rectangle(box, outline=fill, width=w)
    elif label == 7:
        draw.line((cx - r, cy - r, cx + r, cy + r), fill=fill, width=w)
        draw.line((cx - r, cy + r, cx + r, cy - r), fill=fill, width=w)
    elif label == 8:
        for offset in (-r / 2, r / 2):
            draw.rectangle((cx - r, cy + offset - w, cx + r, cy + offset + w), fill=fill)
    else:
        draw.polygon([(cx - r, cy - r), (cx + r, cy - r), (cx, cy + r)], fill=fill)


def render_image(label: int, spec: DatasetSpec, gen: np.random.Generator) -> np.ndarray:
    """One [1, H, W] image of class ``label``."""
    size = spec.image_size
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)

    for _ in range(spec.distractors):
        x, y = gen.uniform(1, size - 2, size=2)
        dot = gen.uniform(0.8, 1.8)
        draw.ellipse((x - dot, y - dot, x + dot, y + dot), fill=int(gen.integers(70, 200)))

    r = gen.uniform(0.12, 0.22) * size
    cx, cy = gen.uniform(r + 1, size - r - 2, size=2)
    _draw_shape(draw, label, cx, cy, r, int(gen.integers(180, 256)))

    pixels = np.asarray(canvas, dtype=np.float32) / 255.0
    if spec.noise_level > 0:
        pixels = pixels + gen.normal(0.0, spec.noise_level, size=pixels.shape).astype(np.float32)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)[None]


def generate_split(spec: DatasetSpec, count: int, rng: Rng) -> ShapesDataset:
    """Class-balanced split of ``count`` images in shuffled order."""
    labels = np.repeat(np.arange(spec.num_classes), count // spec.num_classes)
    labels = labels[rng.permutation(len(labels))].astype(np.int64)
    images = np.stack([render_image(int(label), spec, rng.generator) for label in labels])
    return ShapesDataset(images=images, labels=labels)


def generate_dataset(spec: DatasetSpec) -> Tuple[ShapesDataset, ShapesDataset]:
    """Train and eval splits; a pure function of ``spec``."""
    root = Rng(spec.seed)
    train = generate_split(spec, spec.num_train, root.child(0))
    evaluation = generate_split(spec, spec.num_eval, root.child(1))
    logger.info(
        "Generated synthetic shapes",
        extra={"train": len(train), "eval": len(evaluation), "seed": spec.seed},
    )
    return train, evaluation


# ---------------------------------------------------------------------------
# TOFD codec
# ---------------------------------------------------------------------------

def _record_dtype(channels: int, height: int, width: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("pixels", "<f4", (channels, height, width))])


def encode_dataset(dataset: ShapesDataset) -> bytes:
    count, channels, height, width = dataset.images.shape
    records = np.empty(count, dtype=_record_dtype(channels, height, width))
    records["label"] = dataset.labels
    records["pixels"] = dataset.images
    return HEADER.pack(MAGIC, VERSION, count, channels, height, width) + records.tobytes()


def decode_dataset(data: bytes, num_classes: Optional[int] = None) -> ShapesDataset:
    """Parse TOFD bytes.

    Raises:
        DatasetParseError: bad header, truncated record or trailing bytes
        DataError: a label outside 0..num_classes-1
    """
    if len(data) < HEADER.size:
        raise DatasetParseError("truncated header", offset=len(data))
    magic, version, count, channels, height, width = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DatasetParseError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise DatasetParseError(f"unsupported dataset version {version}", offset=4)
    dtype = _record_dtype(channels, height, width)
    available = (len(data) - HEADER.size) // dtype.itemsize
    if available < count:
        raise DatasetParseError(
            "truncated record", offset=HEADER.size + available * dtype.itemsize, record_index=available
        )
    end = HEADER.size + count * dtype.itemsize
    if end != len(data):
        raise DatasetParseError(f"{len(data) - end} trailing bytes", offset=end)

    records = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size)
    labels = records["label"].astype(np.int64)
    if num_classes is not None and count and int(labels.max()) >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DataError(f"record {bad}: label {labels[bad]} outside 0..{num_classes - 1}")
    images = records["pixels"].astype(np.float32)
    return ShapesDataset(images=images, labels=labels)


def write_dataset(path: Union[str, Path], dataset: ShapesDataset) -> Path:
    """Write ``path`` plus a companion ``<stem>_labels.csv`` (index,label)."""
    path = Path(path)
    atomic_write_bytes(path, encode_dataset(dataset))
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["index", "label"])
    writer.writerows((i, int(label)) for i, label in enumerate(dataset.labels))
    atomic_write_text(path.with_name(f"{path.stem}_labels.csv"), buffer.getvalue())
    return path


def read_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> ShapesDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return decode_dataset(path.read_bytes(), num_classes)


def read_image_dir(directory: Union[str, Path], cfg: ModelConfig) -> ShapesDataset:
    """Load PNG images listed in ``labels.csv`` (``filename,label``)."""
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.is_file():
        raise DataError(f"no labels.csv in {directory}")
    mode = "L" if cfg.channels == 1 else "RGB"
    images, labels = [], []
    with labels_path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if not {"filename", "label"} <= set(reader.fieldnames or ()):
            raise DataError(f"{labels_path}: header must contain filename,label")
        for line, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError) as e:
                raise DataError(f"{labels_path}:{line}: label {row['label']!r} is not an integer") from e
            if not 0 <= label < cfg.num_classes:
                raise DataError(f"{labels_path}:{line}: label {label} outside 0..{cfg.num_classes - 1}")
            try:
                with Image.open(directory / row["filename"]) as img:
                    pixels = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
            except (OSError, TypeError, UnidentifiedImageError) as e:
                raise DataError(f"{labels_path}:{line}: cannot read image {row['filename']!r}: {e}") from e
            if pixels.ndim == 2:
                pixels = pixels[None]
            else:
                pixels = np.transpose(pixels, (2, 0, 1))
            if pixels.shape != (cfg.channels, cfg.image_size, cfg.image_size):
                raise DataError(f"{row['filename']}: image shape {pixels.shape} does not match config")
            images.append(pixels)
            labels.append(label)
    if not images:
        raise DataError(f"{labels_path} lists no images")
    return ShapesDataset(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64))


def load_dataset(path: Union[str, Path], cfg: ModelConfig, split: str = "train") -> ShapesDataset:
    """Load a split from a TOFD file, a generated directory or an image directory."""
    path = Path(path)
    if path.is_dir():
        candidate = path / f"{split}.tofd"
        if candidate.is_file():
            dataset = read_dataset(candidate, cfg.num_classes)
        elif any(path.glob("*.tofd")):
            raise DataError(f"{path} has no {split}.tofd")
        else:
            dataset = read_image_dir(path, cfg)
    else:
        if path.stem in SPLITS and path.stem != split:
            raise DataError(f"{path.name} holds the {path.stem} split, not {split}")
        dataset = read_dataset(path, cfg.num_classes)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if tuple(dataset.images.shape[1:]) != expected:
        raise DataError(f"dataset images {tuple(dataset.images.shape[1:])} do not match config {expected}")
    logger.info("Loaded dataset", extra={"path": str(path), "split": split, "images": len(dataset)})
    return dataset


def iter_batches(
    dataset: ShapesDataset,
    batch_size: int,
    rng: Optional[Rng] = None,
    dtype: torch.dtype = torch.float32,
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield (images, labels) batches; shuffled when ``rng`` is given."""
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield torch.from_numpy(dataset.images[idx]).to(dtype), torch.from_numpy(dataset.labels[idx])
