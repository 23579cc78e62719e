"""
Memorization Audit
Purpose: Score generated samples by their distance to the nearest training
image relative to that image's own neighborhood, and render the closest pairs
Uses: torch.cdist for chunked exact distances, torchvision for the pair grid,
matplotlib for the score histogram

score(g) = l2(g, x) / (alpha * mean_{y in S_x} l2(x, y)), where x is the
training image nearest to g and S_x its n nearest training images other than x.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib
import numpy as np
import pandas as pd
import torch
from torchvision.utils import make_grid, save_image

from data.datasets import LabeledImageDataset, to_tensor
from diffusion.sampler import DEFAULT_STEPS
from errors import ArgumentError
from federation.server import client_seed, draw_labels, generate_from_checkpoint

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_NEIGHBORS = 50
DEFAULT_ALPHA = 0.5
DEFAULT_THRESHOLD = 1.0
HISTOGRAM_BINS = 50
PAIR_COUNT = 30
CHUNK = 1024


@dataclass
class MemorizationReport:
    scores: np.ndarray
    nearest_train_index: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    histogram_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    histogram_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def flagged_indices(self) -> np.ndarray:
        return np.flatnonzero(self.scores < self.threshold)

    @property
    def flagged_count(self) -> int:
        return int(self.flagged_indices.size)

    @property
    def min_score(self) -> float:
        return float(self.scores.min()) if self.scores.size else float("nan")

    def lowest(self, count: int = PAIR_COUNT) -> np.ndarray:
        """Indices of the lowest scores, ties by index"""
        order = np.lexsort((np.arange(self.scores.size), self.scores))
        return order[:count]

    def to_dict(self) -> Dict:
        finite = self.scores[np.isfinite(self.scores)]
        return {
            "count": int(self.scores.size),
            "threshold": self.threshold,
            "flagged_count": self.flagged_count,
            "flagged_indices": self.flagged_indices.tolist(),
            "min_score": self.min_score,
            "median_score": float(np.median(finite)) if finite.size else None,
            "lowest_pairs": [
                {"generated": int(i), "train": int(self.nearest_train_index[i]), "score": float(self.scores[i])}
                for i in self.lowest()
            ],
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "audit_report.json", "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        pd.DataFrame({
            "bin_low": self.histogram_edges[:-1],
            "bin_high": self.histogram_edges[1:],
            "count": self.histogram_counts,
        }).to_csv(directory / "audit_hist.csv", index=False)
        return directory


def _flatten(images) -> torch.Tensor:
    if isinstance(images, LabeledImageDataset):
        images = images.images
    array = np.asarray(images, dtype=np.float64)
    return torch.from_numpy(array.reshape(array.shape[0], -1))


def nearest(queries: torch.Tensor, references: torch.Tensor, k: int = 1,
            exclude: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    k smallest l2 distances from every query to the references, chunked over queries

    Args:
        exclude: Optional per-query reference index to skip (the query itself)

    Returns:
        (distances, indices), each queries x k, ascending
    """
    distances, indices = [], []
    for start in range(0, queries.shape[0], CHUNK):
        block = torch.cdist(queries[start:start + CHUNK], references)
        if exclude is not None:
            rows = torch.arange(block.shape[0])
            block[rows, exclude[start:start + CHUNK]] = float("inf")
        values, positions = torch.topk(block, k, dim=1, largest=False, sorted=True)
        distances.append(values)
        indices.append(positions)
    return torch.cat(distances), torch.cat(indices)


def memorization_scores(generated,
                        train,
                        n: int = DEFAULT_NEIGHBORS,
                        alpha: float = DEFAULT_ALPHA,
                        threshold: float = DEFAULT_THRESHOLD) -> MemorizationReport:
    """
    Adaptive nearest-neighbor score of every generated sample

    Args:
        generated: count x H x W x Ch images in [0, 1]
        train: LabeledImageDataset or array of training images in [0, 1]
        n: Neighborhood size of the nearest training image
        alpha: Metric coefficient
        threshold: Scores below it are flagged

    Returns:
        MemorizationReport
    """
    gen = _flatten(generated)
    ref = _flatten(train)
    if n >= ref.shape[0]:
        raise ArgumentError(f"n={n} needs more than {n} training images, got {ref.shape[0]}")
    if gen.shape[1] != ref.shape[1]:
        raise ArgumentError(f"generated images have {gen.shape[1]} values, training images {ref.shape[1]}")

    to_train, nearest_index = nearest(gen, ref, k=1)
    to_train, nearest_index = to_train[:, 0], nearest_index[:, 0]

    anchors = torch.unique(nearest_index)
    neighborhood, _ = nearest(ref[anchors], ref, k=n, exclude=anchors)
    density = torch.zeros(ref.shape[0], dtype=torch.float64)
    density[anchors] = neighborhood.mean(dim=1)

    numerator = to_train.numpy()
    denominator = alpha * density[nearest_index].numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(denominator > 0, numerator / denominator, np.where(numerator > 0, np.inf, 0.0))

    finite = scores[np.isfinite(scores)]
    counts, edges = np.histogram(finite, bins=HISTOGRAM_BINS) if finite.size else (np.zeros(0, np.int64), np.zeros(1))
    report = MemorizationReport(
        scores=scores,
        nearest_train_index=nearest_index.numpy().astype(np.int64),
        threshold=threshold,
        histogram_edges=edges,
        histogram_counts=counts,
    )
    logger.info("Audit: %d samples, min score %.4f, %d below %.2f",
                scores.size, report.min_score, report.flagged_count, threshold)
    return report


# ========== RENDERING ==========

def render_nearest_pairs(generated: np.ndarray, train_images: np.ndarray, report: MemorizationReport,
                         path, count: int = PAIR_COUNT) -> Path:
    """Grid of (generated, nearest training image) pairs with the lowest scores, two per row"""
    chosen = report.lowest(count)
    tiles: List[np.ndarray] = []
    for i in chosen:
        tiles.append(generated[i])
        tiles.append(train_images[report.nearest_train_index[i]])
    grid = make_grid(to_tensor(np.stack(tiles)), nrow=2, padding=2, pad_value=1.0)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(grid, str(path))
    return path


def render_histogram(report: MemorizationReport, path) -> Path:
    """Score histogram with a log-scale count axis and the threshold marked"""
    fig, ax = plt.subplots(figsize=(6, 4))
    if report.histogram_counts.size:
        ax.stairs(np.maximum(report.histogram_counts, 0), report.histogram_edges, fill=True, alpha=0.7)
    ax.axvline(report.threshold, color="red", linestyle="--", label=f"threshold {report.threshold:g}")
    ax.set_yscale("log")
    ax.set_xlabel("distance score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def audit_generator(payload,
                    train: LabeledImageDataset,
                    oversample: int = 5,
                    steps: int = DEFAULT_STEPS,
                    threshold: float = DEFAULT_THRESHOLD,
                    n: int = DEFAULT_NEIGHBORS,
                    alpha: float = DEFAULT_ALPHA,
                    seed: int = 0,
                    sample_batch_size: int = 500,
                    device: str = "cpu",
                    output_dir=None) -> Tuple[MemorizationReport, np.ndarray]:
    """
    Generate oversample x |train| samples from a client's denoiser and audit them

    Args:
        payload: ClientPayload with a denoiser checkpoint
        train: The data the generator is compared to (its shard by default)
        oversample: Generated samples per training image
        steps: Reverse steps S
        output_dir: When given, receives audit_report.json, audit_hist.csv,
                    nearest_pairs.png and audit_hist.png

    Returns:
        (report, generated images)
    """
    if payload.checkpoint.kind != "denoiser":
        raise ArgumentError(f"client {payload.client_id} holds a {payload.checkpoint.kind}, not a denoiser")

    stream = client_seed(seed, payload.client_id)
    count = oversample * len(train)
    labels = draw_labels(train.label_counts(), count, np.random.default_rng(stream))
    generated = generate_from_checkpoint(payload.checkpoint, labels, steps, stream,
                                         batch_size=sample_batch_size, device=device)
    report = memorization_scores(generated, train, n=n, alpha=alpha, threshold=threshold)

    if output_dir is not None:
        output_dir = Path(output_dir)
        report.save(output_dir)
        render_nearest_pairs(generated, train.images, report, output_dir / "nearest_pairs.png")
        render_histogram(report, output_dir / "audit_hist.png")
    return report, generated
