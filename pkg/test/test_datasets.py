import json

import numpy as np
import pytest
import torch

from data.datasets import (
    LabeledImageDataset,
    from_model_range,
    from_tensor,
    ingest,
    load_dataset,
    save_dataset,
    subset,
    to_model_range,
    to_tensor,
)
from data.partition import ClientShard, dirichlet_partition, partition_summary
from errors import DatasetValidationError, IngestionError, PartitionError

from conftest import make_dataset


def reference_partition(labels, class_count, client_count, alpha, seed):
    """Independent class-wise Dirichlet split on the same random stream"""
    rng = np.random.default_rng(seed)
    pieces = [set() for _ in range(client_count)]
    for k in range(class_count):
        rows = np.array([i for i, label in enumerate(labels) if label == k])
        rng.shuffle(rows)
        p = rng.dirichlet([alpha] * client_count)
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.zeros(client_count)
            p[rng.integers(client_count)] = 1.0
        start = 0
        cumulative = 0.0
        for c in range(client_count):
            if c < client_count - 1:
                cumulative += p[c]
                stop = int(np.floor(cumulative * len(rows)))
            else:
                stop = len(rows)
            pieces[c].update(int(i) for i in rows[start:stop])
            start = stop
    return pieces


# ========== DATASET ==========

def test_model_range_endpoints_and_round_trip():
    assert to_model_range(0.0) == -1.0
    assert to_model_range(0.5) == 0.0
    t = torch.rand(4, 1, 8, 8)
    assert torch.allclose(from_model_range(to_model_range(t)), t, atol=1e-6)


def test_tensor_layout_round_trip(tiny_dataset):
    tensor = to_tensor(tiny_dataset.images)
    assert tensor.shape == (40, 1, 8, 8)
    np.testing.assert_array_equal(from_tensor(tensor), tiny_dataset.images)


def test_labels_out_of_range_rejected():
    with pytest.raises(DatasetValidationError):
        LabeledImageDataset(np.zeros((2, 4, 4, 1)), np.array([0, 3]), class_count=2)


def test_pixels_out_of_range_rejected():
    with pytest.raises(DatasetValidationError):
        LabeledImageDataset(np.full((1, 4, 4, 1), 1.5), np.array([0]), class_count=1)


def test_custom_single_image_round_trip(tmp_path):
    image = np.random.default_rng(0).random((1, 32, 32, 1)).astype(np.float32)
    save_dataset(LabeledImageDataset(image, np.array([0]), class_count=1), tmp_path / "custom" / "train")
    loaded = load_dataset("custom", tmp_path, "train")
    assert len(loaded) == 1
    assert loaded.images.max() <= 1.0
    np.testing.assert_array_equal(loaded.images, image)


def test_28px_images_upsampled_to_32(tmp_path):
    dataset = make_dataset(count=3, size=28)
    save_dataset(dataset, tmp_path / "fashionmnist" / "test")
    loaded = load_dataset("fashionmnist", tmp_path, "test")
    assert loaded.image_shape == (32, 32, 1)
    assert loaded.images.min() >= 0.0 and loaded.images.max() <= 1.0


def test_missing_file_names_the_file(tmp_path):
    save_dataset(make_dataset(count=2), tmp_path / "custom" / "train")
    (tmp_path / "custom" / "train" / "labels.bin").unlink()
    with pytest.raises(IngestionError) as info:
        load_dataset("custom", tmp_path, "train")
    assert "labels.bin" in str(info.value)


def test_corrupt_image_file_detected(tmp_path):
    directory = save_dataset(make_dataset(count=2), tmp_path / "custom" / "train")
    with open(directory / "meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    meta["count"] = 5
    with open(directory / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f)
    with pytest.raises(IngestionError):
        load_dataset("custom", tmp_path, "train")


def test_ingest_npz_archive(tmp_path):
    rng = np.random.default_rng(1)
    np.savez(tmp_path / "toy.npz",
             train_images=rng.integers(0, 256, (6, 32, 32), dtype=np.uint8),
             train_labels=np.array([0, 1, 2, 0, 1, 2]),
             test_images=rng.integers(0, 256, (3, 32, 32), dtype=np.uint8),
             test_labels=np.array([0, 1, 2]))
    written = ingest("custom", tmp_path / "toy.npz", tmp_path / "root")
    assert set(written) == {"train", "test"}
    train = load_dataset("custom", tmp_path / "root", "train")
    assert len(train) == 6 and train.class_count == 3 and train.image_shape == (32, 32, 1)


def test_subset_is_deterministic(tiny_dataset):
    a = subset(tiny_dataset, 10, seed=3)
    b = subset(tiny_dataset, 10, seed=3)
    assert len(a) == 10
    np.testing.assert_array_equal(a.images, b.images)
    assert subset(tiny_dataset, None) is tiny_dataset


# ========== PARTITION ==========

def test_single_client_gets_everything(tiny_dataset):
    shards = dirichlet_partition(tiny_dataset, 1, alpha=0.5, seed=0)
    assert len(shards) == 1
    np.testing.assert_array_equal(shards[0].indices, np.arange(len(tiny_dataset)))


def test_partition_matches_reference_script():
    dataset = make_dataset(count=12, classes=2)
    shards = dirichlet_partition(dataset, 3, alpha=0.01, seed=0)
    expected = reference_partition(dataset.labels, 2, 3, 0.01, 0)
    if all(expected):
        assert [set(s.indices.tolist()) for s in shards] == expected
    else:
        # empty clients were repaired; the union is still exact
        assert set().union(*[set(s.indices.tolist()) for s in shards]) == set(range(12))


@pytest.mark.parametrize("alpha", [0.001, 0.1, 10.0])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_partition_is_a_set_partition(alpha, seed):
    dataset = make_dataset(count=200, classes=5, seed=seed)
    shards = dirichlet_partition(dataset, 10, alpha=alpha, seed=seed)
    union = np.concatenate([s.indices for s in shards])
    assert sorted(union.tolist()) == list(range(200))
    assert all(len(s) > 0 for s in shards)
    for shard in shards:
        recomputed = np.bincount(dataset.labels[shard.indices], minlength=5)
        np.testing.assert_array_equal(recomputed, shard.label_counts)


def test_partition_deterministic(tiny_dataset):
    a = dirichlet_partition(tiny_dataset, 4, alpha=0.1, seed=7)
    b = dirichlet_partition(tiny_dataset, 4, alpha=0.1, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.indices, y.indices)


def test_large_alpha_splits_evenly():
    labels = np.arange(10000) % 2
    dataset = LabeledImageDataset(np.zeros((10000, 1, 1, 1), dtype=np.float32), labels, class_count=2)
    shares = []
    for seed in range(10):
        shards = dirichlet_partition(dataset, 2, alpha=1e6, seed=seed)
        shares.append(shards[0].label_counts / 5000.0)
    mean_share = np.mean(shares, axis=0)
    assert np.all(np.abs(mean_share - 0.5) < 0.05)


def test_small_alpha_concentrates_classes():
    dataset = make_dataset(count=1000, classes=10)
    shards = dirichlet_partition(dataset, 10, alpha=0.001, seed=0)
    matrix = partition_summary(shards, 10)
    top_two = np.sort(matrix, axis=1)[:, -2:].sum(axis=1)
    dominated = top_two / matrix.sum(axis=1) >= 0.9
    assert dominated.sum() >= 5


def test_more_clients_than_samples_rejected():
    with pytest.raises(PartitionError):
        dirichlet_partition(make_dataset(count=3), 5, alpha=1.0)


def test_shard_round_trip():
    shard = ClientShard(client_id=2, indices=np.array([1, 5]), label_counts=np.array([1, 1]))
    restored = ClientShard.from_dict(shard.to_dict())
    assert restored.client_id == 2
    np.testing.assert_array_equal(restored.indices, shard.indices)
