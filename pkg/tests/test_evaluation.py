"""Test suite for evaluation, benchmarking, diagnostics and exports."""

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from app.core import flops as flops_model
from app.core.errors import ContractViolation
from app.core.tensor_ops import Rng
from app.models.config import DatasetSpec, LossWeights, ModelConfig, StagePlan, TrainConfig
from app.services.backbone import VisionTransformer, init_linear
from app.services.dataset import generate_dataset, iter_batches
from app.services.evaluation import (
    band_means,
    bench_analytic,
    evaluate,
    evaluate_baseline,
    export_masks,
    run_inference,
    similarity_diagnostic,
    write_tradeoff_csv,
)
from app.services.inference import InferenceEngine
from app.services.metrics import MetricsCollector
from app.services.tofe_modules import ToFeModel, bias_selector_keep_all
from app.services.trainer import BackboneTrainer, ToFeTrainer, masked_stage_forward


@pytest.fixture
def eval_split(tiny_spec):
    return generate_dataset(tiny_spec)[1]


def test_keep_all_model_reports_full_ratios(tiny_model, eval_split, tiny_cfg):
    for selector in tiny_model.selectors:
        bias_selector_keep_all(selector)
    report = evaluate(tiny_model, eval_split, "instance", batch_size=8)
    assert report.keep_ratios == [1.0, 1.0, 1.0]
    assert report.gflops_blocks == pytest.approx(flops_model.baseline_flops(tiny_cfg) / 1e9)
    assert report.reused_mean == [0.0, 0.0]
    assert 0.0 <= report.top1 <= 100.0


def test_reports_are_deterministic(tiny_model, eval_split):
    first = evaluate(tiny_model, eval_split, "instance", batch_size=8)
    second = evaluate(tiny_model, eval_split, "instance", batch_size=8, workers=2)
    assert first.deterministic_view() == second.deterministic_view()


def test_batch_mode_report(tiny_model, eval_split):
    report = evaluate(tiny_model, eval_split, "batch", batch_size=4, keep_ratios=[0.5, 0.25, 0.125])
    assert report.keep_ratios == [0.5, 0.25, 0.125]
    assert report.mode == "batch"
    assert report.num_images == 20


def test_baseline_report(tiny_backbone, eval_split, tiny_cfg):
    report = evaluate_baseline(tiny_backbone, eval_split, batch_size=8)
    assert report.mode == "baseline"
    assert report.gflops_mean == pytest.approx(flops_model.baseline_flops(tiny_cfg) / 1e9)
    assert report.gflops_overhead == 0.0


def test_bench_analytic_numbers_repeat(tiny_model, eval_split):
    metrics = MetricsCollector(enabled=True, command="bench")
    first = bench_analytic(tiny_model, eval_split, iterations=2, warmup=1, metrics=metrics)
    second = bench_analytic(tiny_model, eval_split, iterations=2, warmup=1)
    assert first.deterministic_view() == second.deterministic_view()
    assert first.wall_clock_ms_per_image > 0
    assert 0 < first.extra["budget_fraction"] <= 1.5
    assert first.extra["block_flops_counted"] == first.extra["block_flops_analytic"]
    with pytest.raises(ContractViolation):
        bench_analytic(tiny_model, eval_split, iterations=0)


def test_bench_baseline(tiny_backbone, eval_split):
    report = bench_analytic(tiny_backbone, eval_split, iterations=1, warmup=0)
    assert report.mode == "baseline"
    assert report.extra["budget_fraction"] == pytest.approx(1.0)


def test_similarity_matrix_properties(tiny_backbone, eval_split):
    matrix = similarity_diagnostic(tiny_backbone, torch.from_numpy(eval_split.images[:6]))
    assert matrix.shape == (4, 4)
    assert np.array_equal(np.diag(matrix), np.ones(4))
    assert np.array_equal(matrix, matrix.T)
    bands = band_means(matrix)
    assert set(bands) == {"near_mean", "far_mean"}


def test_similarity_of_keep_all_tofe_matches_backbone(tiny_model, eval_split):
    images = torch.from_numpy(eval_split.images[:6])
    baseline = similarity_diagnostic(tiny_model.backbone, images)
    for selector in tiny_model.selectors:
        bias_selector_keep_all(selector)
    assert np.array_equal(similarity_diagnostic(tiny_model, images), baseline)


def test_similarity_reflects_frozen_tokens(tiny_model, eval_split):
    images = torch.from_numpy(eval_split.images[:6])
    for selector in tiny_model.selectors:
        bias_selector_keep_all(selector, margin=-10.0)
    matrix = similarity_diagnostic(tiny_model, images)
    assert matrix.shape == (4, 4)
    assert not np.array_equal(matrix, similarity_diagnostic(tiny_model.backbone, images))


def test_band_means_example():
    matrix = np.array([[1.0, 0.9, 0.2], [0.9, 1.0, 0.8], [0.2, 0.8, 1.0]])
    bands = band_means(matrix)
    assert bands["near_mean"] == pytest.approx(0.85)
    assert bands["far_mean"] == pytest.approx(0.2)


def test_export_masks_writes_maps(tiny_model, eval_split, tmp_path):
    run = run_inference(InferenceEngine(tiny_model, "instance"), eval_split.subset(5), batch_size=4)
    written = export_masks(run.usage, 4, tmp_path)
    names = {path.name for path in written}
    assert {"usage_map.csv", "usage_map.pgm", "stage1_keep.csv", "stage3_keep.pgm", "masks.csv"} <= names

    grid = np.loadtxt(tmp_path / "usage_map.csv", delimiter=",")
    assert grid.shape == (4, 4)
    assert grid.min() >= 1 and grid.max() <= 4
    with Image.open(tmp_path / "usage_map.pgm") as img:
        assert img.size == (4, 4)
        assert img.mode == "L"
    rows = (tmp_path / "masks.csv").read_text().splitlines()
    assert len(rows) == 1 + 5 * 3


def test_write_tradeoff_csv(tmp_path):
    path = write_tradeoff_csv(
        tmp_path / "tradeoff.csv",
        [{"fraction": 0.5, "target_gflops": 0.001, "gflops_mean": 0.0011, "top1": 80.0, "ignored": 1.0}],
    )
    lines = path.read_text().splitlines()
    assert lines[0] == "fraction,target_gflops,gflops_mean,top1"
    assert lines[1].startswith("0.5,")


# ---------------------------------------------------------------------------
# Trained toy model (enable with --runslow)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_toy():
    """Baseline ViT and a ToFe fine-tune at half the baseline cost."""
    cfg = ModelConfig(image_size=32, patch_size=4, depth=6, embed_dim=32, num_heads=4, num_classes=4)
    plan = StagePlan(locations=(2, 4, 6), depth=6)
    train, evaluation = generate_dataset(
        DatasetSpec(num_train=2000, num_eval=400, image_size=32, num_classes=4, seed=1)
    )
    backbone = VisionTransformer(cfg, Rng(0))
    BackboneTrainer(TrainConfig(epochs=20, warmup_epochs_frozen_backbone=0, batch_size=32)).fit(backbone, train)
    baseline = evaluate_baseline(backbone, evaluation)
    model = ToFeModel(backbone, plan, Rng(1))
    target = 0.5 * flops_model.baseline_flops(cfg)
    config = TrainConfig(epochs=15, warmup_epochs_frozen_backbone=2, batch_size=32, target_flops=target)
    result = ToFeTrainer(model, config, LossWeights()).fit(train)
    return {"model": model, "baseline": baseline, "result": result, "train": train, "eval": evaluation}


@pytest.mark.slow
def test_accuracy_is_retained_at_half_budget(trained_toy):
    baseline = trained_toy["baseline"]
    tofe = evaluate(trained_toy["model"], trained_toy["eval"], "instance")
    assert baseline.top1 >= 90.0
    assert tofe.top1 >= baseline.top1 - 3.0
    assert tofe.gflops_blocks < baseline.gflops_blocks


@pytest.mark.slow
@pytest.mark.parametrize("batch_size", [1, 16, 64])
def test_batch_mode_accuracy_tracks_instance_mode(trained_toy, batch_size):
    model, evaluation = trained_toy["model"], trained_toy["eval"]
    instance = evaluate(model, evaluation, "instance")
    batch = evaluate(model, evaluation, "batch", batch_size, avg_counts=trained_toy["result"].avg_counts)
    assert abs(batch.top1 - instance.top1) <= 0.5


@pytest.mark.slow
def test_trained_model_reuses_tokens(trained_toy):
    run = run_inference(InferenceEngine(trained_toy["model"], "instance"), trained_toy["eval"])
    reusing = [sum(usage.reused_counts()) > 0 for usage in run.usage]
    assert np.mean(reusing) >= 0.5


@pytest.mark.slow
def test_forward_forms_agree_on_predictions(trained_toy):
    model, evaluation = trained_toy["model"], trained_toy["eval"]
    engine = InferenceEngine(model, "instance")
    agree = total = 0
    with torch.no_grad():
        for images, _ in iter_batches(evaluation, 50):
            masked = masked_stage_forward(model, images, mode="infer").logits.argmax(dim=-1)
            gathered = engine.forward(images).logits.argmax(dim=-1)
            agree += int((masked == gathered).sum())
            total += len(images)
    assert agree / total >= 0.99


@pytest.mark.slow
def test_pixel_linear_classifier_trails_the_vit(trained_toy):
    """The shapes task is not solvable from raw pixels by a linear model."""
    train, evaluation = trained_toy["train"], trained_toy["eval"]
    features = torch.from_numpy(train.images).flatten(1)
    labels = torch.from_numpy(train.labels.astype(np.int64))
    classifier = nn.Linear(features.shape[1], 4)
    init_linear(classifier, Rng(2))
    optimizer = torch.optim.AdamW(classifier.parameters(), lr=1e-2)
    for _ in range(300):
        optimizer.zero_grad()
        nn.functional.cross_entropy(classifier(features), labels).backward()
        optimizer.step()
    with torch.no_grad():
        predictions = classifier(torch.from_numpy(evaluation.images).flatten(1)).argmax(dim=-1).numpy()
    linear_top1 = 100.0 * float((predictions == evaluation.labels).mean())
    assert linear_top1 < trained_toy["baseline"].top1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
