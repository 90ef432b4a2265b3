"""Evaluation, benchmarking, diagnostics and exports built on the engines."""

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from app.core import flops as flops_model
from app.core.errors import ContractViolation
from app.core.storage import atomic_write_bytes, atomic_write_text
from app.models.reports import AvgKeepCounts, FlopsReport, RunReport
from app.services.backbone import VisionTransformer
from app.services.dataset import ShapesDataset, iter_batches
from app.services.inference import (
    InferenceEngine,
    InferenceResult,
    TokenUsage,
    stage_keep_frequency,
    token_usage_map,
)
from app.services.metrics import MetricsCollector, timed
from app.services.tofe_modules import ToFeModel
from app.services.trainer import masked_stage_forward

logger = logging.getLogger(__name__)

GIGA = 1e9


@dataclass
class EvaluationRun:
    """Raw per-instance outcome behind a RunReport."""

    predictions: np.ndarray
    labels: np.ndarray
    usage: List[TokenUsage]
    flops: List[FlopsReport]
    seconds: float


def _chunks(dataset: ShapesDataset, size: int, dtype: torch.dtype):
    return list(iter_batches(dataset, size, None, dtype))


def run_inference(
    engine: InferenceEngine,
    dataset: ShapesDataset,
    batch_size: int = 64,
    workers: int = 1,
    dtype: torch.dtype = torch.float32,
    metrics: Optional[MetricsCollector] = None,
) -> EvaluationRun:
    """Run ``engine`` over ``dataset``; batches fan out over ``workers`` threads."""
    batches = _chunks(dataset, batch_size, dtype)
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results: List[InferenceResult] = list(pool.map(lambda b: engine.forward(b[0]), batches))
    else:
        results = [engine.forward(images) for images, _ in batches]
    seconds = time.perf_counter() - start
    if metrics is not None:
        metrics.track_inference(engine.mode, len(dataset), seconds)
    return EvaluationRun(
        predictions=torch.cat([r.logits.argmax(dim=-1) for r in results]).numpy(),
        labels=dataset.labels,
        usage=[u for r in results for u in r.usage],
        flops=[f for r in results for f in r.flops],
        seconds=seconds,
    )


def _reuse_stats(usage: Sequence[TokenUsage]) -> Dict[str, List[float]]:
    stages = usage[0].num_stages if usage else 0
    if stages < 2:
        return {"reused_mean": [], "reused_ratio": [], "reuse_positive_fraction": []}
    reused = np.array([u.reused_counts() for u in usage], dtype=np.float64)
    kept = np.array([u.keep_counts()[1:] for u in usage], dtype=np.float64)
    ratio = np.divide(reused, kept, out=np.zeros_like(reused), where=kept > 0)
    return {
        "reused_mean": reused.mean(axis=0).tolist(),
        "reused_ratio": ratio.mean(axis=0).tolist(),
        "reuse_positive_fraction": (reused > 0).mean(axis=0).tolist(),
    }


def summarize(
    command: str,
    run: EvaluationRun,
    model: ToFeModel,
    mode: str,
    batch_size: int,
) -> RunReport:
    """Accuracy, itemised mean GFLOPs, keep ratios and reuse statistics."""
    cfg = model.cfg
    blocks = np.mean([f.block_flops for f in run.flops])
    overhead = np.mean([f.overhead_flops for f in run.flops])
    keep = np.array([u.keep_counts() for u in run.usage], dtype=np.float64) / cfg.num_patches
    report = RunReport(
        command=command,
        mode=mode,
        num_images=len(run.labels),
        batch_size=batch_size,
        top1=100.0 * float((run.predictions == run.labels).mean()),
        keep_ratios=keep.mean(axis=0).tolist(),
        gflops_mean=float(blocks + overhead) / GIGA,
        gflops_blocks=float(blocks) / GIGA,
        gflops_overhead=float(overhead) / GIGA,
        gflops_embed_head=flops_model.embed_head_flops(cfg) / GIGA,
        baseline_gflops=flops_model.baseline_flops(cfg) / GIGA,
        wall_clock_seconds=run.seconds,
        **_reuse_stats(run.usage),
    )
    logger.info(
        "Evaluation complete",
        extra={"mode": mode, "top1": report.top1, "gflops": report.gflops_mean, "images": report.num_images},
    )
    return report


def evaluate_baseline(
    backbone: VisionTransformer,
    dataset: ShapesDataset,
    batch_size: int = 64,
    dtype: torch.dtype = torch.float32,
    command: str = "eval",
) -> RunReport:
    """Plain ViT accuracy at full-length cost."""
    cfg = backbone.cfg
    backbone.eval()
    start = time.perf_counter()
    correct = 0
    with torch.no_grad():
        for images, labels in iter_batches(dataset, batch_size, None, dtype):
            correct += int((backbone(images).argmax(dim=-1) == labels).sum())
    baseline = flops_model.baseline_flops(cfg) / GIGA
    return RunReport(
        command=command,
        mode="baseline",
        num_images=len(dataset),
        batch_size=batch_size,
        top1=100.0 * correct / max(1, len(dataset)),
        gflops_mean=baseline,
        gflops_blocks=baseline,
        gflops_overhead=0.0,
        gflops_embed_head=flops_model.embed_head_flops(cfg) / GIGA,
        baseline_gflops=baseline,
        wall_clock_seconds=time.perf_counter() - start,
    )


@timed("evaluate")
def evaluate(
    model: ToFeModel,
    dataset: ShapesDataset,
    mode: str = "instance",
    batch_size: int = 64,
    avg_counts: Optional[AvgKeepCounts] = None,
    keep_ratios: Optional[Sequence[float]] = None,
    workers: int = 1,
    dtype: torch.dtype = torch.float32,
    metrics: Optional[MetricsCollector] = None,
) -> RunReport:
    engine = InferenceEngine(model, mode, avg_counts=avg_counts, keep_ratios=keep_ratios)
    run = run_inference(engine, dataset, batch_size, workers, dtype, metrics)
    return summarize("eval", run, model, mode, batch_size)


def bench_analytic(
    model: Union[ToFeModel, VisionTransformer],
    dataset: ShapesDataset,
    mode: str = "instance",
    avg_counts: Optional[AvgKeepCounts] = None,
    keep_ratios: Optional[Sequence[float]] = None,
    iterations: int = 100,
    warmup: int = 10,
    dtype: torch.dtype = torch.float32,
    metrics: Optional[MetricsCollector] = None,
) -> RunReport:
    """Mean analytic GFLOPs over ``dataset`` plus single-image wall clock.

    The wall-clock figure is indicative only; the analytic numbers are exact
    and reproducible.
    """
    if iterations < 1:
        raise ContractViolation("bench needs at least one timed iteration")
    if isinstance(model, VisionTransformer):
        report = evaluate_baseline(model, dataset, dtype=dtype, command="bench")
        forward = model
        label = "baseline"
    else:
        engine = InferenceEngine(model, mode, avg_counts=avg_counts, keep_ratios=keep_ratios)
        report = summarize("bench", run_inference(engine, dataset, 64, 1, dtype), model, mode, 1)
        forward = engine.forward
        label = mode
    sample = torch.from_numpy(dataset.images[:1]).to(dtype)
    with torch.no_grad():
        for _ in range(warmup):
            forward(sample)
        start = time.perf_counter()
        for _ in range(iterations):
            forward(sample)
        elapsed = time.perf_counter() - start
    if metrics is not None:
        metrics.track_inference(label, iterations, elapsed)
    extra = dict(report.extra)
    extra["baseline_total_gflops"] = (report.baseline_gflops or 0.0) + (report.gflops_embed_head or 0.0)
    extra["budget_fraction"] = (report.gflops_mean or 0.0) / report.baseline_gflops if report.baseline_gflops else 0.0
    backbone = model if isinstance(model, VisionTransformer) else model.backbone
    cfg = backbone.cfg
    analytic = flops_model.flops_per_block(cfg.num_tokens, cfg.embed_dim, cfg.hidden_dim)
    counted = flops_model.count_block_flops(backbone.blocks[0], cfg.num_tokens, cfg.embed_dim)
    if counted != analytic:
        logger.warning("Instrumented block FLOPs disagree", extra={"analytic": analytic, "counted": counted})
    extra["block_flops_analytic"] = float(analytic)
    extra["block_flops_counted"] = float(counted)
    return report.model_copy(update={
        "extra": extra,
        "wall_clock_ms_per_image": 1000.0 * elapsed / iterations,
    })


def similarity_diagnostic(model: Union[ToFeModel, VisionTransformer], images: torch.Tensor) -> np.ndarray:
    """L×L mean cosine similarity between per-token outputs of every block pair.

    A ToFe model runs its masked forward with inference-mode decisions, so
    frozen tokens contribute their parked values.
    """
    model.eval()
    with torch.no_grad():
        if isinstance(model, ToFeModel):
            outputs = masked_stage_forward(model, images, mode="infer", capture=True).block_outputs
        else:
            _, outputs = model.forward_features(images, capture=True)
    depth = len(outputs)
    matrix = np.ones((depth, depth), dtype=np.float64)
    for i in range(depth):
        for j in range(i + 1, depth):
            value = float(F.cosine_similarity(outputs[i], outputs[j], dim=-1).mean())
            matrix[i, j] = matrix[j, i] = value
    return matrix


def band_means(matrix: np.ndarray, width: int = 1) -> Dict[str, float]:
    """Mean similarity within ``width`` of the diagonal (excluding it) vs beyond."""
    depth = matrix.shape[0]
    distance = np.abs(np.subtract.outer(np.arange(depth), np.arange(depth)))
    near = matrix[(distance > 0) & (distance <= width)]
    far = matrix[distance > width]
    return {
        "near_mean": float(near.mean()) if near.size else float("nan"),
        "far_mean": float(far.mean()) if far.size else float("nan"),
    }


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def matrix_csv(matrix: np.ndarray, fmt: str = "{:.6f}") -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in np.atleast_2d(matrix):
        writer.writerow([fmt.format(v) for v in row])
    return buffer.getvalue()


def write_matrix_csv(path: Union[str, Path], matrix: np.ndarray) -> Path:
    return atomic_write_text(path, matrix_csv(matrix))


def write_pgm(path: Union[str, Path], grid: np.ndarray, max_value: float) -> Path:
    """8-bit grey map of ``grid`` with ``max_value`` at 255."""
    scaled = np.zeros_like(grid, dtype=np.float64) if max_value <= 0 else grid / max_value
    pixels = np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    # a 2-D uint8 array maps to mode "L", which the PPM writer stores as binary PGM
    Image.fromarray(pixels).save(buffer, format="PPM")
    return atomic_write_bytes(path, buffer.getvalue())


def export_masks(usage: Sequence[TokenUsage], grid_size: int, out_dir: Union[str, Path]) -> List[Path]:
    """Usage heat map, per-stage keep frequencies and raw per-instance masks."""
    out_dir = Path(out_dir)
    stages = usage[0].num_stages if usage else 0
    freq = token_usage_map(usage, grid_size)
    written = [
        write_matrix_csv(out_dir / "usage_map.csv", freq),
        write_pgm(out_dir / "usage_map.pgm", freq, stages + 1),
    ]
    for stage, grid in enumerate(stage_keep_frequency(usage, grid_size), start=1):
        written.append(write_matrix_csv(out_dir / f"stage{stage}_keep.csv", grid))
        written.append(write_pgm(out_dir / f"stage{stage}_keep.pgm", grid, 1.0))

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["image", "stage"] + [f"p{i}" for i in range(usage[0].num_patches if usage else 0)])
    for index, record in enumerate(usage):
        for stage in range(record.num_stages):
            writer.writerow([index, stage + 1] + record.stage_bits(stage).tolist())
    written.append(atomic_write_text(out_dir / "masks.csv", buffer.getvalue()))
    logger.info("Exported token masks", extra={"directory": str(out_dir), "files": len(written)})
    return written


def write_tradeoff_csv(path: Union[str, Path], rows: Sequence[Dict[str, float]]) -> Path:
    """Budget sweep table: one row per target fraction."""
    buffer = io.StringIO()
    fields = ["fraction", "target_gflops", "gflops_mean", "top1"]
    writer = csv.DictWriter(buffer, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: row[key] for key in fields})
    return atomic_write_text(path, buffer.getvalue())
