"""
One-Shot Server
Purpose: Collect client payloads once, generate the global synthetic dataset
from the client denoisers and train the global classifier on it
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from config.config import config as runtime_config
from data.datasets import LabeledImageDataset, from_model_range, from_tensor, read_dataset_dir, save_dataset
from diffusion.sampler import DEFAULT_STEPS, sample
from diffusion.schedule import schedule_from_dict
from diffusion.trainer import TrainConfig
from errors import IngestionError, ProtocolError
from federation.classifier_training import classifier_config_for, evaluate_accuracy, train_classifier

logger = logging.getLogger(__name__)

PROVENANCE_FILE = "provenance.csv"


@dataclass
class SyntheticDataset:
    """Generated samples with the client that produced each one and its FMF score (NaN if unscored)"""
    dataset: LabeledImageDataset
    sources: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64)
        if self.scores is None:
            self.scores = np.full(self.sources.shape[0], np.nan)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.sources.shape[0] != len(self.dataset) or self.scores.shape[0] != len(self.dataset):
            raise ProtocolError(
                f"provenance covers {self.sources.shape[0]} rows for {len(self.dataset)} samples"
            )

    def __len__(self) -> int:
        return len(self.dataset)

    def select(self, indices) -> "SyntheticDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(self.dataset.select(indices), self.sources[indices], self.scores[indices])

    def with_scores(self, scores) -> "SyntheticDataset":
        return SyntheticDataset(self.dataset, self.sources.copy(), np.asarray(scores, dtype=np.float64))

    def provenance(self) -> pd.DataFrame:
        return pd.DataFrame({
            "index": np.arange(len(self)),
            "label": self.dataset.labels,
            "client_id": self.sources,
            "score": self.scores,
        })

    def save(self, directory) -> Path:
        directory = save_dataset(self.dataset, directory)
        self.provenance().to_csv(Path(directory) / PROVENANCE_FILE, index=False)
        return directory

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        dataset = read_dataset_dir(directory, name="synthetic")
        path = Path(directory) / PROVENANCE_FILE
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            raise IngestionError(f"Failed to read provenance {path}: {e}", path=str(path)) from e
        return cls(dataset, frame["client_id"].to_numpy(), frame["score"].to_numpy())


# ========== PROTOCOL TRACE ==========

@dataclass
class UploadEvent:
    client_id: int
    payload_bytes: int
    timestamp: float


@dataclass
class ProtocolTrace:
    """Every client-to-server message of a run"""
    events: List[UploadEvent] = field(default_factory=list)

    def record_upload(self, client_id: int, payload_bytes: int):
        self.events.append(UploadEvent(int(client_id), int(payload_bytes), time.time()))

    def upload_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for event in self.events:
            counts[event.client_id] = counts.get(event.client_id, 0) + 1
        return counts

    def assert_one_shot(self, client_ids=None):
        """Raise ProtocolError unless every client uploaded exactly once"""
        counts = self.upload_counts()
        repeated = sorted(c for c, n in counts.items() if n > 1)
        if repeated:
            raise ProtocolError(f"clients uploaded more than once: {repeated}")
        if client_ids is not None:
            missing = sorted(set(int(c) for c in client_ids) - set(counts))
            if missing:
                raise ProtocolError(f"clients never uploaded: {missing}")

    def total_bytes(self) -> int:
        return sum(event.payload_bytes for event in self.events)

    def to_dict(self) -> Dict:
        return {
            "uploads": [
                {"client_id": e.client_id, "payload_bytes": e.payload_bytes, "timestamp": e.timestamp}
                for e in self.events
            ],
            "total_bytes": self.total_bytes(),
        }


# ========== GENERATION ==========

def allocate_quotas(counts, total: int) -> np.ndarray:
    """
    Split total proportionally to counts by largest remainder

    Floors of total * n_c / sum(n) are topped up one by one in order of the
    largest fractional part (lower index first on ties), so quotas sum to total.
    """
    counts = np.asarray(counts, dtype=np.int64)
    available = int(counts.sum())
    if available <= 0:
        raise ProtocolError("clients hold no samples; cannot allocate generation quotas")
    if total < 0:
        raise ProtocolError(f"total_count must be nonnegative, got {total}")

    exact = counts * total / available
    quotas = np.floor(exact).astype(np.int64)
    remainder = exact - quotas
    shortfall = int(total - quotas.sum())
    if shortfall > 0:
        order = np.lexsort((np.arange(counts.size), -remainder))
        quotas[order[:shortfall]] += 1
    return quotas


def draw_labels(label_counts, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial labels from a client's empirical label distribution"""
    label_counts = np.asarray(label_counts, dtype=np.float64)
    if quota == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(label_counts.size, size=quota, p=label_counts / label_counts.sum()).astype(np.int64)


def client_seed(seed: int, client_id: int) -> int:
    """Independent, reproducible stream per (run seed, client)"""
    return int(np.random.SeedSequence([int(seed), int(client_id)]).generate_state(1)[0])


def generate_from_checkpoint(checkpoint, labels: np.ndarray, steps: int, seed: int,
                             batch_size: int = 500, device: str = "cpu") -> np.ndarray:
    """Sample count x H x W x Ch images in [0, 1] for the given labels"""
    model = checkpoint.to_model(device)
    model.eval()
    schedule = schedule_from_dict(checkpoint.metadata["schedule"])
    generator = torch.Generator().manual_seed(seed)

    chunks = []
    for start in range(0, labels.shape[0], batch_size):
        images = sample(model, labels[start:start + batch_size], schedule, steps=steps,
                        generator=generator, device=device)
        chunks.append(from_tensor(from_model_range(images)).clip(0.0, 1.0))
    cfg = model.config
    if not chunks:
        return np.zeros((0, cfg.image_size, cfg.image_size, cfg.image_channels), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def server_generate(payloads: List,
                    total_count: int,
                    steps: int = DEFAULT_STEPS,
                    seed: int = 0,
                    sample_batch_size: int = 500,
                    device: str = "cpu") -> SyntheticDataset:
    """
    Build the global synthetic dataset from the client denoisers

    Args:
        payloads: ClientPayload list carrying denoiser checkpoints
        total_count: Number of samples to generate (the original train size)
        steps: Reverse steps S per sample
        seed: Run seed; each client gets its own derived stream
        sample_batch_size: Samples per sampling batch

    Returns:
        SyntheticDataset with per-sample provenance
    """
    if not payloads:
        raise ProtocolError("no client payloads to generate from")
    for payload in payloads:
        if payload.checkpoint.kind != "denoiser":
            raise ProtocolError(f"client {payload.client_id} uploaded a {payload.checkpoint.kind}, not a denoiser")

    counts = [int(np.sum(p.label_counts)) for p in payloads]
    quotas = allocate_quotas(counts, total_count)
    class_count = int(len(payloads[0].label_counts))

    images, labels, sources = [], [], []
    for payload, quota in zip(payloads, quotas):
        stream = client_seed(seed, payload.client_id)
        client_labels = draw_labels(payload.label_counts, int(quota), np.random.default_rng(stream))
        logger.info("Generating %d samples from client %d (S=%d)", quota, payload.client_id, steps)
        images.append(generate_from_checkpoint(payload.checkpoint, client_labels, steps, stream,
                                               batch_size=sample_batch_size, device=device))
        labels.append(client_labels)
        sources.append(np.full(int(quota), payload.client_id, dtype=np.int64))

    dataset = LabeledImageDataset(
        images=np.concatenate(images, axis=0),
        labels=np.concatenate(labels),
        class_count=class_count,
        name="synthetic",
    )
    return SyntheticDataset(dataset, np.concatenate(sources))


# ========== GLOBAL MODEL ==========

def train_global(synthetic: SyntheticDataset,
                 test: LabeledImageDataset,
                 train_config: TrainConfig,
                 seed: int = 0) -> Tuple[torch.nn.Module, float]:
    """
    Train the global classifier on the synthetic set and evaluate on the test set

    Args:
        synthetic: Generated (and possibly filtered) training data
        test: Held-out real test data
        train_config: Epochs (50 by default for the global model), lr, batch size

    Returns:
        (classifier, top-1 test accuracy)
    """
    if len(synthetic) == 0:
        raise ProtocolError("synthetic dataset is empty; nothing to train the global model on")
    missing = np.flatnonzero(synthetic.dataset.label_counts() == 0)
    if missing.size:
        logger.warning("Synthetic data has no samples for classes %s; training on the rest", missing.tolist())

    checkpoint = train_classifier(synthetic.dataset, classifier_config_for(synthetic.dataset, seed), train_config)
    model = checkpoint.to_model(train_config.device)
    accuracy = evaluate_accuracy(model, test, train_config.device)
    logger.info("Global model accuracy: %.4f", accuracy)
    return model, accuracy


def global_train_config(epochs: int, lr: float, batch_size: int, seed: int, device: str = None) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
                       device=device or runtime_config.DEVICE)
