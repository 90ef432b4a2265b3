"""Command-line entry point: logging setup and the ``tofe`` subcommands."""

import logging
import sys
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
import torch
import typer
from pythonjsonlogger import jsonlogger
from rich.console import Console
from rich.table import Table

from app.core import flops as flops_model
from app.core.config import Settings, load_settings
from app.core.errors import EXIT_OK, EXIT_USAGE, ConfigError, DataError, ToFeError
from app.core.storage import append_jsonl
from app.core.tensor_ops import Rng, resolve_dtype, set_debug_checks
from app.models.reports import RunReport
from app.services.backbone import VisionTransformer
from app.services.checkpoint import load_backbone, load_tofe, read_meta, save_backbone, save_tofe
from app.services.dataset import ShapesDataset, generate_dataset, load_dataset, write_dataset
from app.services.evaluation import (
    band_means,
    bench_analytic,
    evaluate,
    evaluate_baseline,
    export_masks,
    run_inference,
    similarity_diagnostic,
    write_matrix_csv,
    write_tradeoff_csv,
)
from app.services.inference import InferenceEngine
from app.services.metrics import MetricsCollector
from app.services.tofe_modules import ToFeModel
from app.services.trainer import BackboneTrainer, ToFeResult, ToFeTrainer

logger = logging.getLogger(__name__)

REPORTS_FILE = "reports.jsonl"


def setup_logging(config: Settings) -> logging.Logger:
    """Configure structured logging on stderr, plus a file when configured."""
    log_level = getattr(logging, config.log_level.upper(), logging.INFO)

    root = logging.getLogger()
    root.setLevel(log_level)
    root.handlers = []

    if config.log_format == "json":
        formatter = jsonlogger.JsonFormatter(
            fmt='%(asctime)s %(name)s %(levelname)s %(message)s',
            rename_fields={"levelname": "level", "asctime": "timestamp"}
        )
    else:
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    root.addHandler(console_handler)

    if config.log_file:
        Path(config.log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(config.log_file)
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    return root


class Mode(str, Enum):
    instance = "instance"
    batch = "batch"


@dataclass
class RunContext:
    command: str
    settings: Settings
    out: Path
    dtype: torch.dtype
    metrics: MetricsCollector


def _start(command: str, config: Optional[Path], out: Path, **overrides) -> RunContext:
    settings = load_settings(config, **{k: v for k, v in overrides.items() if v is not None})
    setup_logging(settings)
    set_debug_checks(settings.debug_checks)
    out.mkdir(parents=True, exist_ok=True)
    logger.info("Starting command", extra={"command": command, "out": str(out), "seed": settings.seed})
    return RunContext(
        command=command,
        settings=settings,
        out=out,
        dtype=resolve_dtype(settings.precision),
        metrics=MetricsCollector(enabled=settings.enable_metrics, command=command),
    )


def _finish(ctx: RunContext, report: RunReport, started: float) -> None:
    report = report.model_copy(update={"wall_clock_seconds": time.perf_counter() - started})
    append_jsonl(ctx.out / REPORTS_FILE, report)
    if ctx.settings.metrics_path:
        ctx.metrics.write(ctx.settings.metrics_path)
    _print_report(report)


def _print_report(report: RunReport) -> None:
    table = Table(title=f"tofe {report.command}", show_header=True, header_style="bold magenta")
    table.add_column("field")
    table.add_column("value", justify="right")
    for key, value in report.model_dump(exclude_none=True).items():
        if key == "command" or value in ([], {}):
            continue
        if isinstance(value, float):
            text = f"{value:.4f}"
        elif isinstance(value, list):
            text = ", ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in value)
        else:
            text = str(value)
        table.add_row(key, text)
    Console().print(table)


def _splits(ctx: RunContext, data: Path) -> Tuple[ShapesDataset, ShapesDataset]:
    if not data.is_dir():
        raise DataError(f"training needs a directory with train and eval splits, got {data}")
    cfg = ctx.settings.vit_config()
    return load_dataset(data, cfg, "train"), load_dataset(data, cfg, "eval")


def _parse_list(text: Optional[str], kind=float) -> Optional[List]:
    if text is None:
        return None
    try:
        return [kind(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise typer.BadParameter(f"not a comma-separated list of {kind.__name__}: {text}") from None


def _target_flops(settings: Settings, fraction: Optional[float] = None) -> float:
    if fraction is None and settings.target_gflops is not None:
        return settings.target_gflops * 1e9
    return (fraction if fraction is not None else settings.target_fraction) * flops_model.baseline_flops(
        settings.vit_config()
    )


def _train_tofe(
    ctx: RunContext,
    backbone_path: Path,
    train: ShapesDataset,
    evaluation: ShapesDataset,
    target_flops: float,
    checkpoint: Path,
    log_path: Path,
) -> Tuple[ToFeModel, ToFeResult]:
    settings = ctx.settings
    backbone = load_backbone(backbone_path, settings.vit_config(), ctx.dtype)
    model = ToFeModel(backbone, settings.stage_plan(), Rng(settings.seed).child(2)).to(ctx.dtype)
    config = settings.train_config("tofe").model_copy(update={"target_flops": target_flops})
    log_path.unlink(missing_ok=True)
    trainer = ToFeTrainer(
        model,
        config,
        settings.loss_weights(),
        dtype=ctx.dtype,
        log_path=log_path,
        metrics=ctx.metrics,
        progress=settings.progress,
    )
    result = trainer.fit(train, evaluation)
    save_tofe(checkpoint, model, result.avg_counts)
    return model, result


app = typer.Typer(
    name="tofe",
    help="Token freezing and reusing toolkit for vision transformers.",
    add_completion=False,
    no_args_is_help=True,
)

ConfigOpt = typer.Option(None, "--config", help="key=value settings file")
SeedOpt = typer.Option(None, "--seed", help="Override the random seed")
OutOpt = typer.Option(Path("runs"), "--out", help="Output directory")
DataOpt = typer.Option(..., "--data", help="Dataset directory or TOFD file")


@app.command("gen-data")
def gen_data(
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    out: Path = OutOpt,
):
    """Generate the synthetic shapes dataset (train.tofd, eval.tofd)."""
    started = time.perf_counter()
    ctx = _start("gen-data", config, out, data_seed=seed)
    train, evaluation = generate_dataset(ctx.settings.dataset_spec())
    write_dataset(out / "train.tofd", train)
    write_dataset(out / "eval.tofd", evaluation)
    report = RunReport(
        command="gen-data",
        num_images=len(train) + len(evaluation),
        artifacts=["train.tofd", "train_labels.csv", "eval.tofd", "eval_labels.csv"],
    )
    _finish(ctx, report, started)


@app.command("train-backbone")
def train_backbone(
    data: Path = DataOpt,
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    out: Path = OutOpt,
):
    """Pretrain the baseline ViT; writes backbone.ckpt."""
    started = time.perf_counter()
    ctx = _start("train-backbone", config, out, seed=seed)
    settings = ctx.settings
    train, evaluation = _splits(ctx, data)
    backbone = VisionTransformer(settings.vit_config(), Rng(settings.seed).child(1)).to(ctx.dtype)
    log_path = out / "backbone_log.jsonl"
    log_path.unlink(missing_ok=True)
    BackboneTrainer(
        settings.train_config("backbone"),
        dtype=ctx.dtype,
        log_path=log_path,
        metrics=ctx.metrics,
        progress=settings.progress,
    ).fit(backbone, train, evaluation)
    save_backbone(out / "backbone.ckpt", backbone)
    report = evaluate_baseline(backbone, evaluation, settings.batch_size, ctx.dtype, command="train-backbone")
    _finish(ctx, report.model_copy(update={"artifacts": ["backbone.ckpt", log_path.name]}), started)


@app.command("train-tofe")
def train_tofe(
    data: Path = DataOpt,
    backbone: Optional[Path] = typer.Option(None, "--backbone", help="Backbone checkpoint"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    target_gflops: Optional[float] = typer.Option(None, "--target-gflops", help="Budget per image in GFLOPs"),
    out: Path = OutOpt,
):
    """Fine-tune selectors and approximators under a FLOPs budget; writes tofe.ckpt."""
    started = time.perf_counter()
    ctx = _start("train-tofe", config, out, seed=seed, target_gflops=target_gflops)
    if backbone is None:
        raise ConfigError("train-tofe needs a pretrained backbone checkpoint (--backbone)")
    train, evaluation = _splits(ctx, data)
    target = _target_flops(ctx.settings)
    model, result = _train_tofe(
        ctx, backbone, train, evaluation, target, out / "tofe.ckpt", out / "tofe_log.jsonl"
    )
    report = evaluate(
        model,
        evaluation,
        "instance",
        ctx.settings.batch_size,
        workers=ctx.settings.eval_workers,
        dtype=ctx.dtype,
        metrics=ctx.metrics,
    )
    extra = {"target_gflops": target / 1e9}
    extra.update({f"avg_keep_count_{s + 1}": c for s, c in enumerate(result.avg_counts.running)})
    _finish(
        ctx,
        report.model_copy(update={"command": "train-tofe", "extra": extra, "artifacts": ["tofe.ckpt", "tofe_log.jsonl"]}),
        started,
    )


def _load_for_eval(ctx: RunContext, checkpoint: Path):
    """(model, avg_counts) for ToFe checkpoints, (backbone, None) for backbone ones."""
    cfg = ctx.settings.vit_config()
    if read_meta(checkpoint).kind == "backbone":
        return load_backbone(checkpoint, cfg, ctx.dtype), None
    return load_tofe(checkpoint, cfg, dtype=ctx.dtype)


@app.command("eval")
def eval_command(
    data: Path = DataOpt,
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Backbone or ToFe checkpoint"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    mode: Optional[Mode] = typer.Option(None, "--mode", help="instance or batch"),
    batch_sizes: Optional[str] = typer.Option(None, "--batch-sizes", help="e.g. 1,16,64"),
    keep_ratios: Optional[str] = typer.Option(None, "--keep-ratios", help="Fixed per-stage keep ratios"),
    out: Path = OutOpt,
):
    """Top-1, mean GFLOPs, keep ratios and reuse statistics on the eval split."""
    started = time.perf_counter()
    ratios = _parse_list(keep_ratios)
    sizes = _parse_list(batch_sizes, int)
    ctx = _start(
        "eval", config, out, seed=seed, inference_mode=mode.value if mode else None, keep_ratios=ratios
    )
    settings = ctx.settings
    evaluation = load_dataset(data, settings.vit_config(), "eval")
    model, avg_counts = _load_for_eval(ctx, checkpoint)
    if isinstance(model, VisionTransformer):
        _finish(ctx, evaluate_baseline(model, evaluation, settings.batch_size, ctx.dtype), started)
        return
    chosen = settings.inference_mode
    for size in (sizes or (settings.eval_batch_sizes if chosen == "batch" else [settings.batch_size])):
        report = evaluate(
            model,
            evaluation,
            chosen,
            size,
            avg_counts=avg_counts,
            keep_ratios=settings.keep_ratios,
            workers=settings.eval_workers,
            dtype=ctx.dtype,
            metrics=ctx.metrics,
        )
        _finish(ctx, report, started)


@app.command("bench")
def bench(
    data: Path = DataOpt,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    mode: Optional[Mode] = typer.Option(None, "--mode"),
    out: Path = OutOpt,
):
    """Itemised analytic GFLOPs plus indicative wall clock per image."""
    started = time.perf_counter()
    ctx = _start("bench", config, out, seed=seed, inference_mode=mode.value if mode else None)
    settings = ctx.settings
    evaluation = load_dataset(data, settings.vit_config(), "eval")
    model, avg_counts = _load_for_eval(ctx, checkpoint)
    report = bench_analytic(
        model,
        evaluation,
        settings.inference_mode,
        avg_counts=avg_counts,
        keep_ratios=settings.keep_ratios,
        iterations=settings.bench_iterations,
        warmup=settings.bench_warmup,
        dtype=ctx.dtype,
        metrics=ctx.metrics,
    )
    _finish(ctx, report, started)


@app.command("export-masks")
def export_masks_command(
    data: Path = DataOpt,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    mode: Optional[Mode] = typer.Option(None, "--mode"),
    limit: int = typer.Option(64, "--limit", min=1, help="Images to export"),
    out: Path = OutOpt,
):
    """Token-usage heat maps (CSV and PGM) and raw per-instance masks."""
    started = time.perf_counter()
    ctx = _start("export-masks", config, out, seed=seed, inference_mode=mode.value if mode else None)
    settings = ctx.settings
    cfg = settings.vit_config()
    sample = load_dataset(data, cfg, "eval").subset(limit)
    model, avg_counts = load_tofe(checkpoint, cfg, dtype=ctx.dtype)
    engine = InferenceEngine(model, settings.inference_mode, avg_counts=avg_counts, keep_ratios=settings.keep_ratios)
    run = run_inference(engine, sample, settings.batch_size, 1, ctx.dtype, ctx.metrics)
    written = export_masks(run.usage, cfg.grid_size, out)
    report = RunReport(
        command="export-masks",
        mode=settings.inference_mode,
        num_images=len(sample),
        artifacts=[path.name for path in written],
    )
    _finish(ctx, report, started)


@app.command("diag-similarity")
def diag_similarity(
    data: Path = DataOpt,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    samples: int = typer.Option(64, "--samples", min=1),
    out: Path = OutOpt,
):
    """Block-by-block cosine similarity of token features (CSV).

    A ToFe checkpoint is measured through its frozen-token forward.
    """
    started = time.perf_counter()
    ctx = _start("diag-similarity", config, out, seed=seed)
    cfg = ctx.settings.vit_config()
    sample = load_dataset(data, cfg, "eval").subset(samples)
    model, _ = _load_for_eval(ctx, checkpoint)
    matrix = similarity_diagnostic(model, torch.from_numpy(sample.images).to(ctx.dtype))
    write_matrix_csv(out / "similarity.csv", matrix)
    report = RunReport(
        command="diag-similarity",
        num_images=len(sample),
        extra=band_means(matrix),
        artifacts=["similarity.csv"],
    )
    _finish(ctx, report, started)


@app.command("sweep-budgets")
def sweep_budgets(
    data: Path = DataOpt,
    backbone: Path = typer.Option(..., "--backbone"),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    fractions: str = typer.Option("0.7,0.5,0.35", "--fractions", help="Budgets as fractions of baseline FLOPs"),
    out: Path = OutOpt,
):
    """Train and evaluate at several budgets; writes tradeoff.csv."""
    started = time.perf_counter()
    budget_fractions = _parse_list(fractions)
    ctx = _start("sweep-budgets", config, out, seed=seed)
    train, evaluation = _splits(ctx, data)
    rows = []
    for fraction in budget_fractions:
        target = _target_flops(ctx.settings, fraction)
        tag = f"{fraction:g}"
        model, _ = _train_tofe(
            ctx, backbone, train, evaluation, target, out / f"tofe_{tag}.ckpt", out / f"tofe_{tag}_log.jsonl"
        )
        report = evaluate(model, evaluation, "instance", ctx.settings.batch_size, dtype=ctx.dtype)
        rows.append({
            "fraction": fraction,
            "target_gflops": target / 1e9,
            "gflops_mean": report.gflops_mean,
            "top1": report.top1,
        })
        _finish(ctx, report.model_copy(update={"command": "sweep-budgets", "extra": {"fraction": fraction}}), started)
    write_tradeoff_csv(out / "tradeoff.csv", rows)


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one CLI invocation and map the outcome to an exit code.

    0 success, 1 usage error, 2 data/config/checkpoint error, 3 numeric failure.
    """
    command = typer.main.get_command(app)
    try:
        command.main(args=list(argv if argv is not None else []), prog_name="tofe", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except ToFeError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        typer.echo(f"error: {e}", err=True)
        return e.exit_code
    return EXIT_OK


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
