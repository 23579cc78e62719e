"""
Baselines
Purpose: One-shot FedAvg, the client ensemble, the centralized reference and
imported results of baselines run with their own code
"""

import json
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd
import torch

from data.datasets import LabeledImageDataset
from diffusion.trainer import TrainConfig
from errors import AggregationError, ArgumentError, IngestionError
from federation.classifier_training import (
    classifier_config_for,
    evaluate_accuracy,
    predict_probabilities,
    train_classifier,
)
from models.checkpoint import ModelCheckpoint

logger = logging.getLogger(__name__)


def _classifier_checkpoints(payloads: List) -> List[ModelCheckpoint]:
    if not payloads:
        raise AggregationError("no client payloads")
    checkpoints = [p.checkpoint for p in payloads]
    for payload, checkpoint in zip(payloads, checkpoints):
        if checkpoint.kind != "classifier":
            raise AggregationError(f"client {payload.client_id} uploaded a {checkpoint.kind}, not a classifier")
        if not checkpoint.same_architecture(checkpoints[0]):
            raise AggregationError(f"client {payload.client_id} uses a different classifier architecture")
    return checkpoints


def fedavg_aggregate(payloads: List) -> torch.nn.Module:
    """
    Parameter-wise mean of the client classifiers weighted by n_c / sum(n)

    Args:
        payloads: ClientPayload list with classifier checkpoints

    Returns:
        Aggregated classifier
    """
    checkpoints = _classifier_checkpoints(payloads)
    counts = np.asarray([p.sample_count for p in payloads], dtype=np.float64)
    if counts.sum() <= 0:
        raise AggregationError("clients hold no samples")
    weights = counts / counts.sum()

    params = {}
    for name in checkpoints[0].params:
        stacked = np.stack([c.params[name].astype(np.float64) for c in checkpoints])
        params[name] = np.tensordot(weights, stacked, axes=1).astype(np.float32)

    aggregated = ModelCheckpoint(
        architecture=dict(checkpoints[0].architecture),
        params=params,
        metadata={"aggregation": "fedavg", "weights": weights.tolist()},
    )
    return aggregated.to_model()


def ensemble_probabilities(payloads: List, images: np.ndarray, device: str = "cpu") -> np.ndarray:
    """Mean softmax vector over the client classifiers for count x H x W x Ch images"""
    checkpoints = _classifier_checkpoints(payloads)
    expected = (checkpoints[0].architecture["image_size"],
                checkpoints[0].architecture["image_size"],
                checkpoints[0].architecture["image_channels"])
    if tuple(images.shape[1:]) != expected:
        raise ArgumentError(f"inputs of shape {tuple(images.shape[1:])} do not fit classifiers expecting {expected}")

    total = None
    for checkpoint in checkpoints:
        probs = predict_probabilities(checkpoint.to_model(device), images, device).astype(np.float64)
        total = probs if total is None else total + probs
    return total / len(checkpoints)


def ensemble_predict(payloads: List, images: np.ndarray, device: str = "cpu") -> np.ndarray:
    """Argmax of the averaged softmax vectors"""
    return ensemble_probabilities(payloads, images, device).argmax(axis=1)


def evaluate_ensemble(payloads: List, test: LabeledImageDataset, device: str = "cpu") -> float:
    return float((ensemble_predict(payloads, test.images, device) == test.labels).mean())


def train_central(train: LabeledImageDataset, test: LabeledImageDataset, train_config: TrainConfig):
    """Classifier on the pooled true training data; the upper reference and the oracle filter"""
    checkpoint = train_classifier(train, classifier_config_for(train, train_config.seed), train_config)
    model = checkpoint.to_model(train_config.device)
    return model, evaluate_accuracy(model, test, train_config.device)


# ========== EXTERNAL RESULTS ==========

def load_external_results(path) -> Dict[str, Dict[int, float]]:
    """
    Per-seed accuracies of baselines produced by their own code

    Accepts a CSV with columns method, seed, accuracy or a JSON object
    {method: {seed: accuracy}} / {method: [accuracy, ...]}.

    Returns:
        method -> {seed: accuracy}
    """
    path = Path(path)
    results: Dict[str, Dict[int, float]] = {}
    try:
        if path.suffix.lower() == ".json":
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
            for method, values in raw.items():
                if isinstance(values, list):
                    results[method] = {i: float(v) for i, v in enumerate(values)}
                else:
                    results[method] = {int(s): float(v) for s, v in values.items()}
        else:
            frame = pd.read_csv(path)
            for row in frame.itertuples(index=False):
                results.setdefault(str(row.method), {})[int(row.seed)] = float(row.accuracy)
    except (OSError, ValueError, KeyError, AttributeError, json.JSONDecodeError) as e:
        raise IngestionError(f"Failed to read external results {path}: {e}", path=str(path)) from e

    if not results:
        raise IngestionError(f"No results in {path}", path=str(path))
    return results
