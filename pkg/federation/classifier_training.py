"""
Classifier Training
Purpose: Supervised training and evaluation of the residual classifier, used
for the global model, the local models of the FedAvg / ensemble baselines and
the centralized reference
Uses: AdamW, optional DP-SGD through privacy.dpsgd
"""

import logging
import time
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config.config import config as runtime_config
from data.datasets import LabeledImageDataset, to_model_range, to_tensor
from diffusion.trainer import TrainConfig, prepare_privacy, steps_per_epoch
from errors import ArgumentError
from models.checkpoint import ModelCheckpoint
from models.classifier import ClassifierConfig, build_classifier
from privacy.accountant import PrivacyLedger, PrivacySpec
from privacy.dpsgd import dpsgd_step, poisson_batch

logger = logging.getLogger(__name__)

EVAL_BATCH = 512


def classifier_config_for(dataset: LabeledImageDataset, seed: int = 0) -> ClassifierConfig:
    height, _, channels = dataset.image_shape
    return ClassifierConfig(image_size=height, image_channels=channels,
                            class_count=dataset.class_count, seed=seed)


def cross_entropy_loss(forward: Callable, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(forward(x), y)


def train_classifier(dataset: LabeledImageDataset,
                     model_config: ClassifierConfig,
                     train_config: TrainConfig,
                     privacy: Optional[PrivacySpec] = None) -> ModelCheckpoint:
    """
    Train a classifier from scratch

    Args:
        dataset: Training samples (pixels in [0, 1])
        model_config: Classifier architecture
        train_config: Epochs, batch size, learning rate, seed
        privacy: Optional budget; every step then goes through DP-SGD

    Returns:
        ModelCheckpoint with epochs, steps and (under DP) the ledger in metadata
    """
    train_config.validate()
    if len(dataset) == 0:
        raise ArgumentError("cannot train a classifier on an empty dataset")

    device = train_config.device
    generator = torch.Generator().manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)

    model = build_classifier(model_config).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)

    x_all = to_model_range(to_tensor(dataset.images))
    y_all = torch.from_numpy(dataset.labels)
    n = len(dataset)

    spec, ledger = None, None
    if privacy is not None:
        spec = prepare_privacy(privacy, n, train_config.batch_size, train_config.epochs)
        ledger = PrivacyLedger(delta=spec.delta)

    step = 0
    started = time.time()
    model.train()
    for _ in tqdm(range(train_config.epochs), desc="classifier", leave=False,
                  disable=not runtime_config.PROGRESS):
        if spec is None:
            order = torch.randperm(n, generator=generator)
            batches = [order[i:i + train_config.batch_size] for i in range(0, n, train_config.batch_size)]
        else:
            batches = [
                torch.from_numpy(poisson_batch(np.arange(n), spec.sample_rate, rng))
                for _ in range(steps_per_epoch(n, train_config.batch_size))
            ]

        for idx in batches:
            x = x_all[idx].to(device)
            y = y_all[idx].to(device)
            if spec is None:
                loss = F.cross_entropy(model(x), y)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
            else:
                batch = (x, y) if len(idx) else ()
                dpsgd_step(model, optimizer, cross_entropy_loss, batch, spec, n,
                           generator=generator, ledger=ledger,
                           microbatch_size=train_config.microbatch_size)
            step += 1

    metadata: Dict = {
        "epochs": train_config.epochs,
        "seed": train_config.seed,
        "lr": train_config.lr,
        "batch_size": train_config.batch_size,
        "steps": step,
        "train_seconds": round(time.time() - started, 3),
    }
    if ledger is not None:
        metadata["privacy"] = spec.to_dict()
        metadata["ledger"] = ledger.to_dict()

    model.eval()
    return ModelCheckpoint.from_model(model, metadata)


# ========== EVALUATION ==========

@torch.no_grad()
def predict_probabilities(model: nn.Module, images: np.ndarray, device: str = "cpu") -> np.ndarray:
    """Softmax outputs for count x H x W x Ch images in [0, 1]"""
    model.eval()
    outputs = []
    for start in range(0, images.shape[0], EVAL_BATCH):
        x = to_model_range(to_tensor(images[start:start + EVAL_BATCH], device=device))
        outputs.append(F.softmax(model(x), dim=1).cpu().numpy())
    if not outputs:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(outputs, axis=0)


def evaluate_accuracy(model: nn.Module, dataset: LabeledImageDataset, device: str = "cpu") -> float:
    """Top-1 accuracy on a labeled set"""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    predictions = predict_probabilities(model, dataset.images, device).argmax(axis=1)
    return float((predictions == dataset.labels).mean())
