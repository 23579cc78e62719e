"""
Shared fixtures: tiny datasets, tiny model configs and temporary stores
"""

import os

os.environ.setdefault("ENVIRONMENT", "test")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from data.datasets import LabeledImageDataset  # noqa: E402
from models.classifier import ClassifierConfig  # noqa: E402
from models.denoiser import DenoiserConfig  # noqa: E402
from storage.artifact_store import ArtifactStore  # noqa: E402


def make_dataset(count: int = 40, size: int = 8, channels: int = 1, classes: int = 2,
                 seed: int = 0, name: str = "custom") -> LabeledImageDataset:
    rng = np.random.default_rng(seed)
    images = rng.random((count, size, size, channels)).astype(np.float32)
    labels = np.arange(count) % classes
    return LabeledImageDataset(images, labels, class_count=classes, name=name)


def pattern_dataset(copies: int = 64, size: int = 8) -> LabeledImageDataset:
    """Two fixed patterns (a bright top half and a bright left half), one per class"""
    top = np.zeros((size, size, 1), dtype=np.float32)
    top[: size // 2] = 1.0
    left = np.zeros((size, size, 1), dtype=np.float32)
    left[:, : size // 2] = 1.0
    images = np.concatenate([np.repeat(top[None], copies, 0), np.repeat(left[None], copies, 0)])
    labels = np.concatenate([np.zeros(copies, dtype=np.int64), np.ones(copies, dtype=np.int64)])
    return LabeledImageDataset(images, labels, class_count=2, name="patterns")


@pytest.fixture
def tiny_dataset() -> LabeledImageDataset:
    return make_dataset()


@pytest.fixture
def patterns() -> LabeledImageDataset:
    return pattern_dataset()


@pytest.fixture
def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(image_size=8, image_channels=1, class_count=2, timesteps=20,
                          widths=(8, 8, 8, 8), bottleneck_blocks=1, embed_dim=16, embed_channels=2)


@pytest.fixture
def tiny_classifier_config() -> ClassifierConfig:
    return ClassifierConfig(image_size=8, image_channels=1, class_count=2,
                            stem_width=8, widths=(8, 8, 8), blocks=(1, 1, 1))


@pytest.fixture
def store(tmp_path) -> ArtifactStore:
    return ArtifactStore(str(tmp_path / "run"))
