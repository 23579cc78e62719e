"""
Ancestral Sampling
Reverse process from x_S ~ N(0, I) down to x_0, optionally over an evenly
strided subsequence of the training timesteps
"""

import logging
from typing import Optional

import numpy as np
import torch
from tqdm import tqdm

from config.config import config as runtime_config
from diffusion.schedule import NoiseSchedule
from errors import ArgumentError

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 1000


def timestep_subsequence(T: int, S: int) -> np.ndarray:
    """Retained steps floor(i * T / S) for i = 1..S (all of 1..T when S == T)"""
    if S < 1:
        raise ArgumentError(f"sampling steps must be >= 1, got {S}")
    if S > T:
        raise ArgumentError(f"sampling steps {S} exceed the schedule's {T} timesteps")
    return (np.arange(1, S + 1, dtype=np.int64) * T) // S


def strided_coefficients(schedule: NoiseSchedule, S: int):
    """
    Per retained step: timestep, alpha', beta', alpha_bar' where
    alpha'_i = alpha_bar(tau_i) / alpha_bar(tau_{i-1})
    """
    taus = timestep_subsequence(schedule.T, S)
    if S == schedule.T:
        return taus, schedule.alphas, schedule.betas, schedule.alpha_bars
    alpha_bars = schedule.alpha_bars[taus - 1]
    previous = np.concatenate([[1.0], alpha_bars[:-1]])
    alphas = alpha_bars / previous
    return taus, alphas, 1.0 - alphas, alpha_bars


@torch.no_grad()
def sample(model,
           labels,
           schedule: NoiseSchedule,
           steps: int = DEFAULT_STEPS,
           generator: Optional[torch.Generator] = None,
           image_shape=None,
           stochastic: bool = True,
           device: str = "cpu") -> torch.Tensor:
    """
    Generate one image per label

    Args:
        model: Callable model(x_t, y, t) -> predicted noise
        labels: Length-B class labels
        schedule: Noise schedule used in training
        steps: Number of reverse steps S (1 <= S <= T)
        generator: Random stream for the initial noise and per-step noise
        image_shape: (channels, height, width); read from model.config when omitted
        stochastic: False disables the per-step noise (sigma_t = 0)
        device: Device for the computation

    Returns:
        B x Ch x H x W images in [-1, 1]
    """
    taus, alphas, betas, alpha_bars = strided_coefficients(schedule, steps)
    labels = torch.as_tensor(labels, dtype=torch.long, device=device).reshape(-1)
    if image_shape is None:
        cfg = model.config
        image_shape = (cfg.image_channels, cfg.image_size, cfg.image_size)

    shape = (labels.shape[0],) + tuple(image_shape)
    x = torch.randn(shape, generator=generator, device="cpu").to(device)

    iterator = range(len(taus) - 1, -1, -1)
    for i in tqdm(iterator, desc="sampling", leave=False, disable=not runtime_config.PROGRESS):
        t = torch.full((shape[0],), int(taus[i]), dtype=torch.long, device=device)
        predicted = model(x, labels, t)
        coef = float(betas[i] / np.sqrt(1.0 - alpha_bars[i]))
        x = (x - coef * predicted) / float(np.sqrt(alphas[i]))
        if stochastic and i > 0:
            z = torch.randn(shape, generator=generator, device="cpu").to(device)
            x = x + float(np.sqrt(betas[i])) * z

    return x.clamp(-1.0, 1.0)
