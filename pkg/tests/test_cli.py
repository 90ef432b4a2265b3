"""Test suite for the command-line surface and its exit codes."""

import json

import pytest

from app import main as cli
from app.core.errors import NumericError
from app.main import cli_dispatch
from app.services.checkpoint import save_tofe
from tests.conftest import write_config


def _reports(out):
    return [json.loads(line) for line in (out / "reports.jsonl").read_text().splitlines()]


@pytest.fixture
def config_file(tmp_path):
    return write_config(tmp_path / "tofe.env")


@pytest.fixture
def data_dir(tmp_path, config_file):
    out = tmp_path / "data"
    assert cli_dispatch(["gen-data", "--config", config_file, "--out", str(out)]) == 0
    return out


def test_gen_data_is_reproducible(tmp_path, config_file, data_dir):
    again = tmp_path / "again"
    assert cli_dispatch(["gen-data", "--config", config_file, "--out", str(again)]) == 0
    for name in ("train.tofd", "eval.tofd", "train_labels.csv"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()
    assert _reports(data_dir)[0]["num_images"] == 60


def test_gen_data_seed_flag_changes_data(tmp_path, config_file, data_dir):
    other = tmp_path / "other"
    assert cli_dispatch(["gen-data", "--config", config_file, "--seed", "99", "--out", str(other)]) == 0
    assert (other / "train.tofd").read_bytes() != (data_dir / "train.tofd").read_bytes()


def test_full_pipeline(tmp_path, config_file, data_dir):
    """Test gen-data through diag-similarity on a tiny configuration."""
    out = tmp_path / "run"
    common = ["--config", config_file, "--out", str(out)]
    data = ["--data", str(data_dir)]
    assert cli_dispatch(["train-backbone", *data, *common]) == 0
    backbone = str(out / "backbone.ckpt")
    assert cli_dispatch(["train-tofe", *data, "--backbone", backbone, *common]) == 0
    tofe = str(out / "tofe.ckpt")
    assert cli_dispatch(["eval", *data, "--checkpoint", tofe, *common]) == 0
    assert cli_dispatch(["eval", *data, "--checkpoint", tofe, "--mode", "batch", *common]) == 0
    assert cli_dispatch(["bench", *data, "--checkpoint", tofe, *common]) == 0
    assert cli_dispatch(["export-masks", *data, "--checkpoint", tofe, "--limit", "4", *common]) == 0
    assert cli_dispatch(["diag-similarity", *data, "--checkpoint", backbone, "--samples", "4", *common]) == 0

    commands = [r["command"] for r in _reports(out)]
    assert commands == ["train-backbone", "train-tofe", "eval", "eval", "bench", "export-masks", "diag-similarity"]
    for name in ("backbone_log.jsonl", "tofe_log.jsonl", "usage_map.pgm", "similarity.csv"):
        assert (out / name).is_file()
    batch = _reports(out)[3]
    assert batch["mode"] == "batch" and batch["batch_size"] == 4


def test_train_tofe_is_reproducible(tmp_path, config_file, data_dir):
    prep = tmp_path / "prep"
    assert cli_dispatch(["train-backbone", "--data", str(data_dir), "--config", config_file, "--out", str(prep)]) == 0
    checkpoints = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["train-tofe", "--data", str(data_dir), "--backbone", str(prep / "backbone.ckpt"),
                "--config", config_file, "--out", str(out)]
        assert cli_dispatch(argv) == 0
        checkpoints.append((out / "tofe.ckpt").read_bytes())
    assert checkpoints[0] == checkpoints[1]


def test_sweep_budgets_writes_tradeoff(tmp_path, config_file, data_dir):
    out = tmp_path / "sweep"
    prep = ["--data", str(data_dir), "--config", config_file, "--out", str(out)]
    assert cli_dispatch(["train-backbone", *prep]) == 0
    assert cli_dispatch(["sweep-budgets", *prep, "--backbone", str(out / "backbone.ckpt"), "--fractions", "0.7,0.5"]) == 0
    lines = (out / "tradeoff.csv").read_text().splitlines()
    assert len(lines) == 3


def test_usage_errors_exit_1(config_file):
    assert cli_dispatch(["gen-data", "--bogus"]) == 1
    assert cli_dispatch(["no-such-command"]) == 1
    assert cli_dispatch(["eval", "--config", config_file]) == 1


def test_config_errors_exit_2(tmp_path, config_file, data_dir):
    assert cli_dispatch(["gen-data", "--config", str(tmp_path / "absent.env")]) == 2
    bad = write_config(tmp_path / "bad.env", depth="many")
    assert cli_dispatch(["gen-data", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    out = str(tmp_path / "y")
    assert cli_dispatch(["train-tofe", "--data", str(data_dir), "--config", config_file, "--out", out]) == 2
    missing = ["train-tofe", "--data", str(data_dir), "--backbone", str(tmp_path / "nope.ckpt"),
               "--config", config_file, "--out", out]
    assert cli_dispatch(missing) == 2


def test_corrupt_inputs_exit_2(tmp_path, config_file, data_dir, tiny_model):
    checkpoint = save_tofe(tmp_path / "tofe.ckpt", tiny_model, None)
    data = bytearray(checkpoint.read_bytes())
    data[16] = 0xFF
    checkpoint.write_bytes(bytes(data))
    common = ["--config", config_file, "--out", str(tmp_path / "c")]
    assert cli_dispatch(["eval", "--data", str(data_dir), "--checkpoint", str(checkpoint), *common]) == 2

    images = tmp_path / "images"
    images.mkdir()
    (images / "labels.csv").write_text("filename,label\nmissing.png,abc\n")
    assert cli_dispatch(["train-backbone", "--data", str(images), *common]) == 2
    assert cli_dispatch(["train-backbone", "--data", str(data_dir / "train.tofd"), *common]) == 2


def test_batch_mode_without_counts_exits_2(tmp_path, config_file, data_dir, tiny_model):
    checkpoint = save_tofe(tmp_path / "untrained.ckpt", tiny_model, None)
    argv = ["eval", "--data", str(data_dir), "--checkpoint", str(checkpoint), "--mode", "batch",
            "--config", config_file, "--out", str(tmp_path / "z")]
    assert cli_dispatch(argv) == 2


def test_numeric_failure_exits_3(tmp_path, config_file, monkeypatch):
    def explode(spec):
        raise NumericError("non-finite values produced by test")

    monkeypatch.setattr(cli, "generate_dataset", explode)
    assert cli_dispatch(["gen-data", "--config", config_file, "--out", str(tmp_path / "n")]) == 3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
