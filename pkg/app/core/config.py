"""Application configuration using Pydantic settings."""

import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError
from app.models.config import DatasetSpec, LossWeights, ModelConfig, StagePlan, TrainConfig


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables or a key=value file."""

    # Model geometry
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    depth: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    mlp_hidden: Optional[int] = None  # defaults to 4 * embed_dim
    num_classes: int = 10

    # Token freezing stages
    stage_locations: List[int] = [3, 5, 7]
    approximator: Literal["bottleneck", "identity", "dwconv", "block"] = "bottleneck"
    selector: Literal["mlp", "local_global"] = "mlp"
    reuse_tokens: bool = True
    gumbel_temperature: float = 1.0

    # Backbone pretraining
    backbone_epochs: int = 30
    backbone_lr: float = 1e-3
    backbone_lr_final: float = 1e-5

    # ToFe fine-tuning
    tofe_epochs: int = 15
    frozen_backbone_epochs: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 0.05
    target_gflops: Optional[float] = None
    target_fraction: float = 0.5  # of baseline block FLOPs, used when target_gflops is unset
    keep_count_decay: float = 0.99
    lambda_cls: float = 1.0
    lambda_apr: float = 2.0
    lambda_flops: float = 5.0
    seed: int = 0

    # Inference / evaluation
    inference_mode: Literal["instance", "batch"] = "instance"
    keep_ratios: Optional[List[float]] = None  # fixed schedule instead of trained counts
    eval_batch_sizes: List[int] = [1, 16, 64]
    eval_workers: int = 1
    bench_iterations: int = 100
    bench_warmup: int = 10

    # Synthetic dataset
    num_train: int = 5000
    num_eval: int = 1000
    noise_level: float = 0.05
    distractors: int = 3
    data_seed: int = 7

    # Numerics
    precision: Literal["float32", "float64"] = "float32"
    debug_checks: bool = False

    # Logging Configuration
    log_level: str = "INFO"
    log_format: str = "json"
    log_file: Optional[str] = None

    # Metrics / progress output
    enable_metrics: bool = False
    metrics_path: Optional[str] = None
    progress: bool = True

    def vit_config(self) -> ModelConfig:
        """Backbone geometry derived from these settings."""
        return _build(
            ModelConfig,
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=self.channels,
            depth=self.depth,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            mlp_hidden=self.mlp_hidden,
            num_classes=self.num_classes,
        )

    def stage_plan(self) -> StagePlan:
        return _build(
            StagePlan,
            locations=tuple(self.stage_locations),
            depth=self.depth,
            approximator=self.approximator,
            selector=self.selector,
            reuse_tokens=self.reuse_tokens,
        )

    def loss_weights(self) -> LossWeights:
        return _build(
            LossWeights,
            lambda_cls=self.lambda_cls,
            lambda_apr=self.lambda_apr,
            lambda_flops=self.lambda_flops,
        )

    def train_config(self, phase: Literal["backbone", "tofe"] = "tofe") -> TrainConfig:
        """Optimisation recipe for one training phase.

        Args:
            phase: ``backbone`` for pretraining, ``tofe`` for the budgeted fine-tune

        Returns:
            Validated TrainConfig
        """
        if phase == "backbone":
            return _build(
                TrainConfig,
                epochs=self.backbone_epochs,
                warmup_epochs_frozen_backbone=0,
                batch_size=self.batch_size,
                lr=self.backbone_lr,
                lr_final=self.backbone_lr_final,
                weight_decay=self.weight_decay,
                seed=self.seed,
            )
        target = self.target_gflops * 1e9 if self.target_gflops is not None else None
        return _build(
            TrainConfig,
            epochs=self.tofe_epochs,
            warmup_epochs_frozen_backbone=self.frozen_backbone_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_final=self.lr_final,
            weight_decay=self.weight_decay,
            target_flops=target,
            seed=self.seed,
            temperature=self.gumbel_temperature,
            keep_count_decay=self.keep_count_decay,
        )

    def dataset_spec(self) -> DatasetSpec:
        return _build(
            DatasetSpec,
            num_train=self.num_train,
            num_eval=self.num_eval,
            image_size=self.image_size,
            num_classes=self.num_classes,
            noise_level=self.noise_level,
            distractors=self.distractors,
            seed=self.data_seed,
        )

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


def _build(model_cls, **values):
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


def load_settings(path: Optional[Union[str, Path]] = None, **overrides) -> Settings:
    """Load settings from a flat key=value file.

    Lines starting with ``#`` are comments. List values are JSON arrays,
    for example ``stage_locations=[3, 5, 7]``.

    Args:
        path: Config file; None uses environment and defaults only
        **overrides: Values that win over the file (CLI flags)

    Returns:
        Settings instance
    """
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        overrides["_env_file"] = str(path)
    try:
        return Settings(**overrides)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration in {path}: {e}") from e


def dump_settings(config: Settings) -> str:
    """Render settings in the key=value format read by ``load_settings``."""
    lines = ["# ToFe toolkit configuration"]
    for name, value in config.model_dump().items():
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            text = json.dumps(list(value))
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines) + "\n"

