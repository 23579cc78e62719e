"""
Dataset Ingestion
Purpose: Load image classification datasets from the on-disk format, convert the
public distributions into it, and move images between pixel ranges and layouts
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import DatasetValidationError, IngestionError

logger = logging.getLogger(__name__)

DATASET_NAMES = ("fashionmnist", "pathmnist", "cifar10", "custom")
SPLITS = ("train", "test")
TARGET_SIZE = 32

IMAGES_FILE = "images.bin"
LABELS_FILE = "labels.bin"
META_FILE = "meta.json"


@dataclass
class LabeledImageDataset:
    """
    Images (count x H x W x Ch, float32 in [0, 1]) with integer labels in [0, K)
    """
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "custom"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.images.ndim != 4:
            raise DatasetValidationError(
                f"{self.name}: images must be count x H x W x Ch, got shape {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetValidationError(
                f"{self.name}: {self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.class_count < 1:
            raise DatasetValidationError(f"{self.name}: class_count must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetValidationError(
                f"{self.name}: labels must lie in [0, {self.class_count}), "
                f"found [{self.labels.min()}, {self.labels.max()}]"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetValidationError(
                f"{self.name}: pixel values must lie in [0, 1], "
                f"found [{self.images.min():.4f}, {self.images.max():.4f}]"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count).astype(np.int64)

    def select(self, indices) -> "LabeledImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            name=self.name,
        )


# ========== RANGE AND LAYOUT ==========

def to_model_range(images):
    """Affine map [0, 1] -> [-1, 1]; works on numpy arrays and tensors"""
    return images * 2.0 - 1.0


def from_model_range(images):
    """Inverse of to_model_range"""
    return (images + 1.0) / 2.0


def to_tensor(images: np.ndarray, device: str = "cpu") -> torch.Tensor:
    """count x H x W x Ch numpy -> count x Ch x H x W float32 tensor"""
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous().to(device)


def from_tensor(images: torch.Tensor) -> np.ndarray:
    """count x Ch x H x W tensor -> count x H x W x Ch float32 numpy"""
    return images.detach().to("cpu", torch.float32).permute(0, 2, 3, 1).contiguous().numpy()


def upsample(images: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Bilinear resize of count x H x W x Ch images to size x size"""
    if images.shape[1] == size and images.shape[2] == size:
        return images
    tensor = to_tensor(images)
    resized = F.interpolate(tensor, size=(size, size), mode="bilinear", align_corners=False)
    return np.clip(from_tensor(resized), 0.0, 1.0)


# ========== ON-DISK FORMAT ==========

def save_dataset(dataset: LabeledImageDataset, directory) -> Path:
    """
    Write images.bin, labels.bin and meta.json

    Args:
        dataset: Dataset to persist
        directory: Target directory (created if missing)

    Returns:
        The directory path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count, height, width, channels = dataset.images.shape

    dataset.images.astype("<f4").tofile(directory / IMAGES_FILE)
    dataset.labels.astype("<i4").tofile(directory / LABELS_FILE)
    meta = {
        "name": dataset.name,
        "count": int(count),
        "height": int(height),
        "width": int(width),
        "channels": int(channels),
        "class_count": int(dataset.class_count),
    }
    with open(directory / META_FILE, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    return directory


def read_dataset_dir(directory, name: str = "custom") -> LabeledImageDataset:
    """Read the on-disk format without resizing"""
    directory = Path(directory)
    meta_path = directory / META_FILE
    images_path = directory / IMAGES_FILE
    labels_path = directory / LABELS_FILE

    for path in (meta_path, images_path, labels_path):
        if not path.is_file():
            raise IngestionError(f"Missing dataset file: {path}", path=str(path))

    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        shape = (int(meta["count"]), int(meta["height"]), int(meta["width"]), int(meta["channels"]))
        class_count = int(meta["class_count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise IngestionError(f"Corrupt dataset metadata {meta_path}: {e}", path=str(meta_path)) from e

    images = np.fromfile(images_path, dtype="<f4")
    if images.size != int(np.prod(shape)):
        raise IngestionError(
            f"Corrupt image file {images_path}: expected {int(np.prod(shape))} values, found {images.size}",
            path=str(images_path),
        )
    labels = np.fromfile(labels_path, dtype="<i4")
    if labels.size != shape[0]:
        raise IngestionError(
            f"Corrupt label file {labels_path}: expected {shape[0]} labels, found {labels.size}",
            path=str(labels_path),
        )

    return LabeledImageDataset(
        images=images.reshape(shape),
        labels=labels.astype(np.int64),
        class_count=class_count,
        name=meta.get("name", name),
    )


def load_dataset(name: str, root, split: str = "train") -> LabeledImageDataset:
    """
    Load <root>/<name>/<split> in the on-disk format, scaled to [0, 1] and 32x32

    Args:
        name: fashionmnist, pathmnist, cifar10 or custom
        root: Dataset root directory (FEDGEN_DATA_ROOT)
        split: train or test

    Returns:
        LabeledImageDataset
    """
    name = name.lower()
    if name not in DATASET_NAMES:
        raise IngestionError(f"Unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if split not in SPLITS:
        raise IngestionError(f"Unknown split {split!r}; expected one of {SPLITS}")

    dataset = read_dataset_dir(Path(root) / name / split, name=name)
    if dataset.images.shape[1] == 28 and dataset.images.shape[2] == 28:
        dataset = LabeledImageDataset(
            images=upsample(dataset.images, TARGET_SIZE),
            labels=dataset.labels,
            class_count=dataset.class_count,
            name=dataset.name,
        )
    dataset.name = name
    logger.info("Loaded %s/%s: %d images of shape %s, %d classes",
                name, split, len(dataset), dataset.image_shape, dataset.class_count)
    return dataset


def subset(dataset: LabeledImageDataset, count: Optional[int], seed: int = 0) -> LabeledImageDataset:
    """Random subset of count rows (the whole dataset when count is None or too large)"""
    if count is None or count >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(len(dataset), size=count, replace=False))
    return dataset.select(indices)


# ========== INGESTION ==========

def _uint8_to_unit(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype == np.uint8 or images.max() > 1.0:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32)


def _from_torchvision(name: str, source: str, split: str, download: bool) -> LabeledImageDataset:
    from torchvision import datasets

    train = split == "train"
    if name == "fashionmnist":
        raw = datasets.FashionMNIST(source, train=train, download=download)
        images = raw.data.numpy()
        labels = raw.targets.numpy()
    else:
        raw = datasets.CIFAR10(source, train=train, download=download)
        images = np.asarray(raw.data)
        labels = np.asarray(raw.targets)
    return LabeledImageDataset(_uint8_to_unit(images), labels, class_count=10, name=name)


def _from_npz(path: Path, split: str, name: str) -> LabeledImageDataset:
    if not path.is_file():
        raise IngestionError(f"Missing source archive: {path}", path=str(path))
    try:
        archive = np.load(path)
        if f"{split}_images" in archive:
            images, labels = archive[f"{split}_images"], archive[f"{split}_labels"]
        else:
            images, labels = archive["images"], archive["labels"]
    except (OSError, KeyError, ValueError) as e:
        raise IngestionError(f"Failed to read {path}: {e}", path=str(path)) from e

    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    class_count = 9 if name == "pathmnist" else int(labels.max()) + 1
    return LabeledImageDataset(_uint8_to_unit(images), labels, class_count=class_count, name=name)


def ingest(name: str, source, root, download: bool = False) -> Dict[str, Path]:
    """
    Convert a native dataset distribution into the on-disk format

    Args:
        name: fashionmnist / cifar10 (torchvision layout under source),
              pathmnist (source is pathmnist.npz), custom (source is an .npz
              with images/labels or <split>_images/<split>_labels arrays)
        source: Directory or archive holding the native distribution
        root: Dataset root receiving <name>/<split>/
        download: Let torchvision fetch missing files

    Returns:
        Mapping split -> written directory
    """
    name = name.lower()
    if name not in DATASET_NAMES:
        raise IngestionError(f"Unknown dataset {name!r}; expected one of {DATASET_NAMES}")

    written = {}
    for split in SPLITS:
        if name in ("fashionmnist", "cifar10"):
            try:
                dataset = _from_torchvision(name, str(source), split, download)
            except RuntimeError as e:
                raise IngestionError(f"Failed to read {name} from {source}: {e}", path=str(source)) from e
        else:
            path = Path(source)
            if name == "custom" and split == "test":
                archive = np.load(path) if path.is_file() else {}
                if "test_images" not in archive:
                    continue
            dataset = _from_npz(path, split, name)

        written[split] = save_dataset(dataset, Path(root) / name / split)
        logger.info("Ingested %s/%s: %d images -> %s", name, split, len(dataset), written[split])
    return written
