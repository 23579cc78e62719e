"""
Local Diffusion Training
Purpose: Train one client's class-conditioned denoiser on its shard, either
with plain minibatches or with DP-SGD over Poisson batches
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config.config import LEARNING_RATE_GRID, config as runtime_config
from data.datasets import LabeledImageDataset, to_model_range, to_tensor
from diffusion.schedule import NoiseSchedule, diffusion_loss, draw_noise, forward_diffuse, noise_prediction_loss
from errors import ArgumentError, BudgetExhaustedError
from models.checkpoint import ModelCheckpoint
from models.denoiser import DenoiserConfig, build_denoiser
from privacy.accountant import PrivacyLedger, PrivacySpec, calibrate_noise, max_steps_within_budget, rdp_epsilon
from privacy.dpsgd import dpsgd_step, poisson_batch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    microbatch_size: int = 32
    device: str = "cpu"

    def validate(self):
        if not any(abs(self.lr - lr) <= 1e-12 for lr in LEARNING_RATE_GRID):
            raise ArgumentError(f"learning rate {self.lr} is not on the grid {LEARNING_RATE_GRID}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class LossHistory:
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    epsilons: List[Optional[float]] = field(default_factory=list)

    def append(self, step: int, loss: float, epsilon: Optional[float] = None):
        self.steps.append(step)
        self.losses.append(loss)
        self.epsilons.append(epsilon)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": self.steps,
            "loss": self.losses,
            "epsilon_spent_if_dp": self.epsilons,
        })

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def steps_per_epoch(dataset_size: int, batch_size: int) -> int:
    return max(1, math.ceil(dataset_size / batch_size))


def prepare_privacy(privacy: PrivacySpec, dataset_size: int, batch_size: int, epochs: int) -> PrivacySpec:
    """
    Fix the sample rate to batch_size / n and calibrate sigma for the whole run,
    or check a given sigma against the budget

    Returns:
        A completed PrivacySpec
    """
    q = min(1.0, batch_size / dataset_size)
    total_steps = epochs * steps_per_epoch(dataset_size, batch_size)
    spec = PrivacySpec(
        epsilon_target=privacy.epsilon_target,
        delta=privacy.delta,
        clip_norm=privacy.clip_norm,
        sample_rate=q,
        noise_multiplier=privacy.noise_multiplier,
    )
    if total_steps == 0:
        return spec

    if spec.noise_multiplier is None:
        spec.noise_multiplier = calibrate_noise(spec.epsilon_target, spec.delta, q, total_steps)
        logger.info("Calibrated noise multiplier %.4f for eps=%.2f over %d steps (q=%.4f)",
                    spec.noise_multiplier, spec.epsilon_target, total_steps, q)
    else:
        spent = rdp_epsilon([(q, spec.noise_multiplier, total_steps)], spec.delta)
        if spent > spec.epsilon_target:
            spendable = max_steps_within_budget(spec.epsilon_target, spec.delta, q, spec.noise_multiplier)
            raise BudgetExhaustedError(
                f"{total_steps} steps at sigma={spec.noise_multiplier} spend eps={spent:.3f} "
                f"> target {spec.epsilon_target}; only {spendable} steps fit",
                spendable_steps=spendable,
            )
    return spec


def train_local_diffusion(dataset: LabeledImageDataset,
                          model_config: DenoiserConfig,
                          schedule: NoiseSchedule,
                          train_config: TrainConfig,
                          privacy: Optional[PrivacySpec] = None,
                          on_step: Optional[Callable[[int, float], None]] = None,
                          history_path=None) -> ModelCheckpoint:
    """
    Minimize the noise prediction loss on one shard

    Args:
        dataset: The client's samples (pixels in [0, 1])
        model_config: Denoiser architecture
        schedule: Noise schedule (T must match model_config.timesteps)
        train_config: Epochs, batch size, learning rate, seed
        privacy: Optional target budget; every step then goes through DP-SGD
        on_step: Optional callback(step, loss)
        history_path: Optional loss-history CSV path

    Returns:
        ModelCheckpoint whose metadata holds epochs, seed, loss history and,
        under DP, the final ledger
    """
    train_config.validate()
    if len(dataset) == 0:
        raise ArgumentError("cannot train on an empty shard")

    device = train_config.device
    generator = torch.Generator().manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)

    model = build_denoiser(model_config).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)

    x_all = to_model_range(to_tensor(dataset.images))
    y_all = torch.from_numpy(dataset.labels)
    n = len(dataset)

    spec, ledger = None, None
    if privacy is not None:
        spec = prepare_privacy(privacy, n, train_config.batch_size, train_config.epochs)
        ledger = PrivacyLedger(delta=spec.delta)

    history = LossHistory()
    step = 0
    started = time.time()
    model.train()
    for epoch in tqdm(range(train_config.epochs), desc="denoiser", leave=False,
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
            x0 = x_all[idx].to(device)
            y = y_all[idx].to(device)
            if spec is None:
                loss = diffusion_loss(model, x0, y, schedule, generator)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                loss_value = float(loss.detach())
                epsilon = None
            else:
                loss_value = float("nan")
                if len(idx):
                    t, noise = draw_noise(x0, schedule, generator)
                    x_t = forward_diffuse(x0, t, noise, schedule)
                    with torch.no_grad():
                        loss_value = float(noise_prediction_loss(model, x_t, y, t, noise))
                    batch = (x_t, y, t, noise)
                else:
                    batch = ()
                dpsgd_step(model, optimizer, noise_prediction_loss, batch, spec, n,
                           generator=generator, ledger=ledger,
                           microbatch_size=train_config.microbatch_size)
                epsilon = ledger.spent_epsilon()

            step += 1
            history.append(step, loss_value, epsilon)
            if on_step is not None:
                on_step(step, loss_value)

    metadata: Dict = {
        "epochs": train_config.epochs,
        "seed": train_config.seed,
        "lr": train_config.lr,
        "batch_size": train_config.batch_size,
        "steps": step,
        "schedule": schedule.to_dict(),
        "train_seconds": round(time.time() - started, 3),
    }
    if ledger is not None:
        metadata["privacy"] = spec.to_dict()
        metadata["ledger"] = ledger.to_dict()
        logger.info("DP training finished: %d steps, eps=%.3f", ledger.steps, ledger.spent_epsilon())

    if history_path is not None:
        history.save_csv(history_path)
    metadata["loss_history"] = history.losses

    model.eval()
    return ModelCheckpoint.from_model(model, metadata)
