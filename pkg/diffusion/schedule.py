"""
Noise Schedule and Forward Process
beta / alpha / alpha_bar sequences, closed-form corruption and the noise
prediction loss. Timesteps are 1-based: index t-1 of each array is step t.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t) - 1]

    def check_step(self, t: torch.Tensor):
        low, high = int(t.min()), int(t.max())
        if low < 1 or high > self.T:
            raise ArgumentError(f"timestep out of range [1, {self.T}]: found [{low}, {high}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Linearly spaced betas

    Args:
        T: Number of timesteps
        beta_start: First beta, 0 < beta_start
        beta_end: Last beta, beta_start < beta_end < 1 (ignored when T == 1)
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return schedule_from_betas([beta_start])
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def schedule_from_dict(payload: dict) -> NoiseSchedule:
    """Rebuild a linear schedule from NoiseSchedule.to_dict output"""
    T = int(payload["T"])
    if T == 1:
        return schedule_from_betas([float(payload["beta_start"])])
    return linear_schedule(T, float(payload["beta_start"]), float(payload["beta_end"]))


def _gather(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    picked = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long() - 1]
    return picked.reshape((-1,) + (1,) * (like.dim() - 1))


def forward_diffuse(x0: torch.Tensor, t, epsilon: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """
    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * epsilon

    Args:
        x0: Clean images in [-1, 1], batch x ...
        t: Int or batch of steps in [1, T]
        epsilon: Gaussian noise shaped like x0
        schedule: Noise schedule
    """
    if x0.shape != epsilon.shape:
        raise ArgumentError(f"x0 shape {tuple(x0.shape)} differs from epsilon shape {tuple(epsilon.shape)}")
    t = torch.as_tensor(t, device=x0.device).long().reshape(-1)
    if t.numel() == 1 and x0.shape[0] != 1:
        t = t.expand(x0.shape[0])
    schedule.check_step(t)

    ab = _gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * epsilon


def draw_noise(x0: torch.Tensor, schedule: NoiseSchedule,
               generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per sample t ~ Uniform{1..T} and epsilon ~ N(0, I)"""
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator, device="cpu").to(x0.device)
    epsilon = torch.randn(x0.shape, generator=generator, device="cpu").to(x0.device, x0.dtype)
    return t, epsilon


def noise_prediction_loss(predict: Callable, x_t: torch.Tensor, y: torch.Tensor,
                          t: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of (epsilon - rho(x_t, y, t))^2"""
    return F.mse_loss(predict(x_t, y, t), epsilon)


def diffusion_loss(model, x0: torch.Tensor, y: torch.Tensor, schedule: NoiseSchedule,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Noise prediction objective with fresh (t, epsilon) draws per sample

    Args:
        model: Callable model(x_t, y, t) -> predicted noise
        x0: Clean batch in [-1, 1]
        y: Labels
        schedule: Noise schedule
        generator: Random stream for t and epsilon

    Returns:
        Scalar loss (differentiable w.r.t. the model parameters)
    """
    if x0.shape[0] == 0:
        raise ArgumentError("diffusion_loss needs a nonempty batch")
    t, epsilon = draw_noise(x0, schedule, generator)
    x_t = forward_diffuse(x0, t, epsilon, schedule)
    return noise_prediction_loss(model, x_t, y, t, epsilon)
