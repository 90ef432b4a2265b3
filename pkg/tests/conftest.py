"""Shared fixtures: tiny geometries that run in milliseconds on a CPU."""

import pytest
import torch

from app.core.tensor_ops import Rng
from app.models.config import DatasetSpec, ModelConfig, StagePlan
from app.services.backbone import VisionTransformer
from app.services.tofe_modules import ToFeModel


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-epoch training runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_cfg():
    """16×16 grey images, 4×4 patches (N=16), D=16, 2 heads, 4 blocks."""
    return ModelConfig(
        image_size=16, patch_size=4, channels=1, depth=4, embed_dim=16, num_heads=2, num_classes=4
    )


@pytest.fixture
def tiny_plan():
    return StagePlan(locations=(2, 3, 4), depth=4)


@pytest.fixture
def tiny_spec():
    return DatasetSpec(num_train=40, num_eval=20, image_size=16, num_classes=4, seed=3)


@pytest.fixture
def tiny_backbone(tiny_cfg):
    return VisionTransformer(tiny_cfg, Rng(0))


OUTPUT_WEIGHTS = {
    "bottleneck": ("fc2.weight",),
    "dwconv": ("conv.weight",),
    "block": ("block.attn.proj.weight", "block.mlp.fc2.weight"),
}


def randomize_approximators(model: ToFeModel, seed: int = 9) -> ToFeModel:
    """Give approximator output layers nonzero weights so ΔX is not zero."""
    rng = Rng(seed)
    with torch.no_grad():
        for key, approximator in enumerate(model.approximators):
            for index, name in enumerate(OUTPUT_WEIGHTS.get(approximator.kind, ())):
                stream = rng.child(key) if index == 0 else rng.child(key).child(index)
                weight = approximator.get_parameter(name)
                weight.copy_(stream.normal(tuple(weight.shape), 0.2, weight.dtype))
    return model


@pytest.fixture
def tiny_model(tiny_backbone, tiny_plan):
    return randomize_approximators(ToFeModel(tiny_backbone, tiny_plan, Rng(1)))


@pytest.fixture
def tiny_images(tiny_cfg):
    return Rng(5).uniform((3, tiny_cfg.channels, tiny_cfg.image_size, tiny_cfg.image_size))


def random_bits(rng: Rng, batch: int, n: int, dtype=torch.float32) -> torch.Tensor:
    return (rng.uniform((batch, n)) < 0.5).to(dtype)


def write_config(path, **values) -> str:
    """Tiny key=value settings file for CLI tests."""
    base = {
        "image_size": 16,
        "patch_size": 4,
        "channels": 1,
        "depth": 4,
        "embed_dim": 16,
        "num_heads": 2,
        "num_classes": 4,
        "stage_locations": "[2, 3, 4]",
        "num_train": 40,
        "num_eval": 20,
        "backbone_epochs": 1,
        "tofe_epochs": 1,
        "frozen_backbone_epochs": 0,
        "batch_size": 8,
        "bench_iterations": 2,
        "bench_warmup": 1,
        "eval_batch_sizes": "[4]",
        "progress": "false",
        "log_level": "WARNING",
    }
    base.update(values)
    path.write_text("".join(f"{key}={value}\n" for key, value in base.items()), encoding="utf-8")
    return str(path)
