"""Test suite for the synthetic shapes dataset and the TOFD format."""

import numpy as np
import pytest
import torch
from PIL import Image

from app.core.errors import DataError, DatasetParseError
from app.core.tensor_ops import Rng
from app.services.dataset import (
    HEADER,
    ShapesDataset,
    decode_dataset,
    encode_dataset,
    generate_dataset,
    iter_batches,
    load_dataset,
    read_dataset,
    write_dataset,
)


def test_generation_is_deterministic(tiny_spec):
    train_a, eval_a = generate_dataset(tiny_spec)
    train_b, eval_b = generate_dataset(tiny_spec)
    assert encode_dataset(train_a) == encode_dataset(train_b)
    assert encode_dataset(eval_a) == encode_dataset(eval_b)
    other, _ = generate_dataset(tiny_spec.model_copy(update={"seed": tiny_spec.seed + 1}))
    assert encode_dataset(other) != encode_dataset(train_a)


def test_generated_splits_are_balanced_and_in_range(tiny_spec):
    train, evaluation = generate_dataset(tiny_spec)
    assert train.images.shape == (40, 1, 16, 16)
    assert train.class_histogram(4).tolist() == [10, 10, 10, 10]
    assert evaluation.class_histogram(4).tolist() == [5, 5, 5, 5]
    assert train.images.dtype == np.float32
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0


def test_write_read_round_trip(tiny_spec, tmp_path):
    train, _ = generate_dataset(tiny_spec)
    path = write_dataset(tmp_path / "train.tofd", train)
    loaded = read_dataset(path, num_classes=4)
    assert np.array_equal(loaded.images, train.images)
    assert np.array_equal(loaded.labels, train.labels)
    lines = (tmp_path / "train_labels.csv").read_text().splitlines()
    assert lines[0] == "index,label"
    assert len(lines) == 41


def test_truncated_file_reports_record(tiny_spec):
    train, _ = generate_dataset(tiny_spec)
    data = encode_dataset(train)
    record_size = (len(data) - HEADER.size) // len(train)
    cut = data[:HEADER.size + 3 * record_size + 10]
    with pytest.raises(DatasetParseError) as info:
        decode_dataset(cut)
    assert info.value.record_index == 3
    assert info.value.offset == HEADER.size + 3 * record_size


def test_bad_header_and_trailing_bytes(tiny_spec):
    train, _ = generate_dataset(tiny_spec)
    data = encode_dataset(train)
    with pytest.raises(DatasetParseError):
        decode_dataset(b"XXXX" + data[4:])
    with pytest.raises(DatasetParseError):
        decode_dataset(data[:10])
    with pytest.raises(DatasetParseError):
        decode_dataset(data + b"\x00")


def test_label_out_of_range():
    dataset = ShapesDataset(images=np.zeros((2, 1, 4, 4), dtype=np.float32), labels=np.array([1, 7]))
    with pytest.raises(DataError):
        decode_dataset(encode_dataset(dataset), num_classes=4)


def test_load_from_generated_directory(tiny_spec, tiny_cfg, tmp_path):
    train, evaluation = generate_dataset(tiny_spec)
    write_dataset(tmp_path / "train.tofd", train)
    write_dataset(tmp_path / "eval.tofd", evaluation)
    assert len(load_dataset(tmp_path, tiny_cfg, "eval")) == 20
    with pytest.raises(DataError):
        load_dataset(tmp_path, tiny_cfg.model_copy(update={"image_size": 32}), "train")


def test_load_image_directory(tiny_cfg, tmp_path):
    rows = ["filename,label"]
    for index in range(3):
        pixels = np.full((16, 16), 40 * index, dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / f"img{index}.png")
        rows.append(f"img{index}.png,{index}")
    (tmp_path / "labels.csv").write_text("\n".join(rows) + "\n")
    dataset = load_dataset(tmp_path, tiny_cfg)
    assert dataset.images.shape == (3, 1, 16, 16)
    assert dataset.labels.tolist() == [0, 1, 2]
    assert dataset.images[2, 0, 0, 0] == pytest.approx(80 / 255)


def test_image_directory_rejects_bad_labels(tiny_cfg, tmp_path):
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "labels.csv").write_text("filename,label\na.png,9\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path, tiny_cfg)


@pytest.mark.parametrize(
    "labels_csv, match",
    [
        ("filename,label\na.png,abc\n", "not an integer"),
        ("filename,label\na.png\n", "not an integer"),
        ("filename,class\na.png,1\n", "header"),
        ("filename,label\nmissing.png,1\n", "cannot read image"),
        ("filename,label\nnot_png.png,1\n", "cannot read image"),
    ],
)
def test_image_directory_malformed_rows_are_data_errors(tiny_cfg, tmp_path, labels_csv, match):
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "not_png.png").write_text("plain text")
    (tmp_path / "labels.csv").write_text(labels_csv)
    with pytest.raises(DataError, match=match):
        load_dataset(tmp_path, tiny_cfg)


def test_generated_directory_missing_split(tiny_spec, tiny_cfg, tmp_path):
    train, _ = generate_dataset(tiny_spec)
    write_dataset(tmp_path / "train.tofd", train)
    with pytest.raises(DataError, match="eval.tofd"):
        load_dataset(tmp_path, tiny_cfg, "eval")


def test_single_file_serves_only_its_own_split(tiny_spec, tiny_cfg, tmp_path):
    train, _ = generate_dataset(tiny_spec)
    path = write_dataset(tmp_path / "train.tofd", train)
    assert len(load_dataset(path, tiny_cfg, "train")) == 40
    with pytest.raises(DataError):
        load_dataset(path, tiny_cfg, "eval")
    other = write_dataset(tmp_path / "holdout.tofd", train)
    assert len(load_dataset(other, tiny_cfg, "eval")) == 40


def test_missing_file():
    with pytest.raises(DataError):
        read_dataset("/nonexistent/train.tofd")


def test_batches_cover_dataset_and_shuffle_reproducibly(tiny_spec):
    train, _ = generate_dataset(tiny_spec)
    batches = list(iter_batches(train, 16, Rng(1)))
    assert [len(labels) for _, labels in batches] == [16, 16, 8]
    assert batches[0][0].dtype == torch.float32
    again = list(iter_batches(train, 16, Rng(1)))
    assert all(torch.equal(a[1], b[1]) for a, b in zip(batches, again))
    ordered = torch.cat([labels for _, labels in iter_batches(train, 16)])
    assert ordered.tolist() == train.labels.tolist()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
