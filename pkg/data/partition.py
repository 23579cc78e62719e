"""
Client Partitioning
Purpose: Split a dataset across simulated clients with Dirichlet label skew
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from data.datasets import LabeledImageDataset
from errors import ArgumentError, PartitionError

logger = logging.getLogger(__name__)


@dataclass
class ClientShard:
    """Row indices held by one client plus its per-class counts"""
    client_id: int
    indices: np.ndarray
    label_counts: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def to_dict(self) -> dict:
        return {
            "client_id": int(self.client_id),
            "indices": self.indices.tolist(),
            "label_counts": self.label_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ClientShard":
        return cls(
            client_id=int(payload["client_id"]),
            indices=np.asarray(payload["indices"], dtype=np.int64),
            label_counts=np.asarray(payload["label_counts"], dtype=np.int64),
        )


def _class_proportions(rng: np.random.Generator, alpha: float, client_count: int) -> np.ndarray:
    proportions = rng.dirichlet(np.full(client_count, alpha))
    # Very small alpha can underflow every component to zero
    if not np.all(np.isfinite(proportions)) or proportions.sum() <= 0:
        proportions = np.zeros(client_count)
        proportions[rng.integers(client_count)] = 1.0
    return proportions


def _repair_empty(pieces: List[List[int]]) -> int:
    moved = 0
    while True:
        empty = [c for c, piece in enumerate(pieces) if not piece]
        if not empty:
            return moved
        largest = max(range(len(pieces)), key=lambda c: (len(pieces[c]), -c))
        pieces[empty[0]].append(pieces[largest].pop())
        moved += 1


def dirichlet_partition(dataset: LabeledImageDataset,
                        client_count: int,
                        alpha: float,
                        seed: int = 0) -> List[ClientShard]:
    """
    Class-wise Dirichlet split of the dataset rows across clients

    For every class k in order the class rows are shuffled, a proportion
    vector is drawn from Dir(alpha * 1_C) and the rows are cut accordingly.
    Empty clients then receive one row from the currently largest client.

    Args:
        dataset: Dataset to split
        client_count: Number of clients C
        alpha: Dirichlet concentration (smaller = more skew)
        seed: Seed of the partition's random stream

    Returns:
        One ClientShard per client, indices sorted ascending
    """
    if client_count < 1:
        raise ArgumentError(f"client_count must be >= 1, got {client_count}")
    if alpha <= 0:
        raise ArgumentError(f"alpha must be positive, got {alpha}")
    if len(dataset) == 0:
        raise PartitionError("Cannot partition an empty dataset")
    if client_count > len(dataset):
        raise PartitionError(
            f"Cannot give {client_count} clients at least one sample each from {len(dataset)} samples"
        )

    rng = np.random.default_rng(seed)
    pieces: List[List[int]] = [[] for _ in range(client_count)]

    for k in range(dataset.class_count):
        class_rows = np.flatnonzero(dataset.labels == k)
        rng.shuffle(class_rows)
        proportions = _class_proportions(rng, alpha, client_count)
        cuts = np.floor(np.cumsum(proportions)[:-1] * len(class_rows)).astype(np.int64)
        for c, part in enumerate(np.split(class_rows, cuts)):
            pieces[c].extend(int(i) for i in part)

    for piece in pieces:
        piece.sort()
    moved = _repair_empty(pieces)
    if moved:
        logger.info("Moved %d sample(s) into otherwise empty clients", moved)

    shards = []
    for c, piece in enumerate(pieces):
        indices = np.asarray(sorted(piece), dtype=np.int64)
        counts = np.bincount(dataset.labels[indices], minlength=dataset.class_count).astype(np.int64)
        shards.append(ClientShard(client_id=c, indices=indices, label_counts=counts))
    return shards


def partition_summary(shards: List[ClientShard], class_count: int) -> np.ndarray:
    """Client x class count matrix"""
    summary = np.zeros((len(shards), class_count), dtype=np.int64)
    for row, shard in enumerate(shards):
        summary[row, :] = shard.label_counts[:class_count]
    return summary
