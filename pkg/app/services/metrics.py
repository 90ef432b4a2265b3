"""Prometheus metrics for training and inference runs.

Tracks:
- Training steps and per-epoch loss components
- Batch-mean GFLOPs and per-stage kept-token counts
- Evaluated images and per-image inference latency

Metrics live in a private registry and are written to a text file at the
end of a CLI run (node-exporter textfile format).
"""

import logging
import time
from functools import wraps
from pathlib import Path
from typing import Optional, Sequence, Union

try:
    from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info, write_to_textfile
    PROMETHEUS_AVAILABLE = True
except ImportError:
    PROMETHEUS_AVAILABLE = False
    CollectorRegistry = Counter = Gauge = Histogram = Info = None

from app.models.reports import TrainingRecord

logger = logging.getLogger(__name__)


class MetricsCollector:
    """Prometheus metrics collection for one toolkit process."""

    def __init__(self, enabled: bool = True, command: str = "unknown"):
        """Initialize Prometheus metrics.

        Args:
            enabled: False turns every tracking call into a no-op
            command: CLI subcommand recorded in the info metric
        """
        if enabled and not PROMETHEUS_AVAILABLE:
            logger.warning(
                "prometheus_client not available. "
                "Install with: pip install prometheus-client>=0.19.0"
            )
        self.enabled = enabled and PROMETHEUS_AVAILABLE
        if not self.enabled:
            return

        self.registry = CollectorRegistry()

        # Training metrics
        self.train_steps = Counter(
            'tofe_train_steps_total',
            'Optimisation steps taken',
            ['phase'],
            registry=self.registry
        )

        self.loss = Gauge(
            'tofe_epoch_loss',
            'Mean loss component over the last epoch',
            ['phase', 'component'],  # total, cls, apr, flops
            registry=self.registry
        )

        self.batch_gflops = Gauge(
            'tofe_batch_gflops',
            'Batch-mean analytic GFLOPs over the last epoch',
            registry=self.registry
        )

        self.keep_count = Gauge(
            'tofe_keep_count',
            'Mean kept patch tokens per stage',
            ['stage'],
            registry=self.registry
        )

        self.accuracy = Gauge(
            'tofe_accuracy',
            'Top-1 accuracy (fraction)',
            ['phase', 'split'],
            registry=self.registry
        )

        # Inference metrics
        self.images = Counter(
            'tofe_images_evaluated_total',
            'Images passed through inference',
            ['mode'],
            registry=self.registry
        )

        self.latency = Histogram(
            'tofe_inference_seconds_per_image',
            'Wall-clock inference time per image',
            ['mode'],
            buckets=[0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1],
            registry=self.registry
        )

        self.info = Info('tofe_run', 'Run information', registry=self.registry)
        self.info.info({'command': command})

        logger.debug("Prometheus metrics collector initialized")

    def track_step(self, phase: str) -> None:
        if not self.enabled:
            return
        self.train_steps.labels(phase=phase).inc()

    def track_epoch(self, record: TrainingRecord) -> None:
        """Export one training-log record."""
        if not self.enabled:
            return
        for component, value in (
            ("total", record.loss_total),
            ("cls", record.loss_cls),
            ("apr", record.loss_apr),
            ("flops", record.loss_flops),
        ):
            self.loss.labels(phase=record.phase, component=component).set(value)
        if record.batch_gflops is not None:
            self.batch_gflops.set(record.batch_gflops)
        self.track_keep_counts(record.keep_counts)
        self.accuracy.labels(phase=record.phase, split="train").set(record.train_accuracy)
        if record.eval_accuracy is not None:
            self.accuracy.labels(phase=record.phase, split="eval").set(record.eval_accuracy)

    def track_keep_counts(self, counts: Sequence[float]) -> None:
        if not self.enabled:
            return
        for stage, count in enumerate(counts):
            self.keep_count.labels(stage=str(stage + 1)).set(count)

    def track_inference(self, mode: str, images: int, seconds: float) -> None:
        """Record ``images`` evaluated in ``seconds`` of wall clock."""
        if not self.enabled or images <= 0:
            return
        self.images.labels(mode=mode).inc(images)
        self.latency.labels(mode=mode).observe(seconds / images)

    def write(self, path: Union[str, Path]) -> Optional[Path]:
        """Write the registry in Prometheus text format."""
        if not self.enabled:
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        logger.info("Wrote metrics", extra={"path": str(path)})
        return path


def timed(label: str):
    """Decorator logging the wall-clock duration of a call at debug level."""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.debug(f"{label} completed", extra={"duration": time.perf_counter() - start_time})
        return wrapper
    return decorator
