"""
DP-SGD
Purpose: Poisson batch sampling and the clipped, noised gradient step
Uses: torch.func for per-sample gradients (functional_call + vmap + grad)

Per-sample gradients are clipped to clip_norm, summed, perturbed with
N(0, sigma^2 clip_norm^2 I) and divided by the expected batch size q * n.
"""

import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call, grad, vmap

from errors import NumericError
from privacy.accountant import PrivacyLedger, PrivacySpec

logger = logging.getLogger(__name__)

CLIP_SLACK = 1e-6


def poisson_batch(indices, q: float, rng: np.random.Generator) -> np.ndarray:
    """
    Include each index independently with probability q

    Args:
        indices: Candidate indices
        q: Inclusion probability in (0, 1]
        rng: numpy random generator

    Returns:
        Selected indices (possibly empty)
    """
    indices = np.asarray(indices)
    if q >= 1.0:
        return indices.copy()
    return indices[rng.random(indices.shape[0]) < q]


def per_sample_gradients(model: nn.Module, loss_fn: Callable, batch: Sequence[torch.Tensor]) -> Dict[str, torch.Tensor]:
    """
    Gradient of loss_fn for every sample of the batch

    Args:
        model: Network whose trainable parameters are differentiated
        loss_fn: loss_fn(forward, *sample_batch) -> scalar, where forward(*inputs)
                 runs the model and sample_batch holds one sample per tensor
                 (leading dimension 1)
        batch: Tensors sharing the leading batch dimension

    Returns:
        Mapping parameter name -> batch x parameter-shape gradients
    """
    params = {name: p.detach() for name, p in model.named_parameters() if p.requires_grad}
    buffers = {name: b.detach() for name, b in model.named_buffers()}

    def sample_loss(p, b, *sample):
        forward = lambda *inputs: functional_call(model, (p, b), inputs)
        return loss_fn(forward, *[s.unsqueeze(0) for s in sample])

    in_dims = (None, None) + (0,) * len(batch)
    return vmap(grad(sample_loss), in_dims=in_dims)(params, buffers, *batch)


def clip_and_sum(grads: Dict[str, torch.Tensor], clip_norm: float) -> Dict[str, torch.Tensor]:
    """Rescale every per-sample gradient to norm <= clip_norm and sum over samples"""
    names = list(grads)
    batch = grads[names[0]].shape[0]
    flat = torch.cat([grads[n].reshape(batch, -1) for n in names], dim=1)
    if not torch.isfinite(flat).all():
        raise NumericError("non-finite per-sample gradient")

    norms = flat.norm(dim=1)
    scale = torch.clamp(clip_norm / (norms + 1e-12), max=1.0)
    clipped_norms = norms * scale
    assert bool((clipped_norms <= clip_norm * (1.0 + CLIP_SLACK)).all()), "clipped gradient exceeds clip norm"

    return {n: torch.einsum("b,b...->...", scale, grads[n]) for n in names}


def dpsgd_step(model: nn.Module,
               optimizer: torch.optim.Optimizer,
               loss_fn: Callable,
               batch: Sequence[torch.Tensor],
               spec: PrivacySpec,
               dataset_size: int,
               generator: Optional[torch.Generator] = None,
               ledger: Optional[PrivacyLedger] = None,
               microbatch_size: int = 32) -> Optional[Dict[str, torch.Tensor]]:
    """
    One DP-SGD update

    Args:
        model: Network being trained
        optimizer: Optimizer over the model's parameters
        loss_fn: Per-sample loss, see per_sample_gradients
        batch: Tensors of a Poisson batch drawn with spec.sample_rate (may be empty)
        spec: Clip norm, noise multiplier and sample rate
        dataset_size: n, so the expected batch size is q * n
        generator: Random stream of the Gaussian noise
        ledger: Records one (q, sigma) event per call
        microbatch_size: Samples per vmap call

    Returns:
        Applied gradient per parameter name, or None for an empty batch
    """
    sigma = spec.noise_multiplier or 0.0
    if ledger is not None:
        ledger.record(spec.sample_rate, sigma, 1)

    size = int(batch[0].shape[0]) if batch else 0
    if size == 0:
        return None

    summed: Dict[str, torch.Tensor] = {}
    for start in range(0, size, microbatch_size):
        chunk = [tensor[start:start + microbatch_size] for tensor in batch]
        clipped = clip_and_sum(per_sample_gradients(model, loss_fn, chunk), spec.clip_norm)
        for name, value in clipped.items():
            summed[name] = summed[name] + value if name in summed else value

    expected_batch = spec.sample_rate * dataset_size
    applied = {}
    for name, param in model.named_parameters():
        if name not in summed:
            continue
        total = summed[name]
        if sigma > 0:
            noise = torch.randn(total.shape, generator=generator, device="cpu").to(total.device, total.dtype)
            total = total + noise * (sigma * spec.clip_norm)
        update = total / expected_batch
        if not torch.isfinite(update).all():
            raise NumericError(f"non-finite update for parameter {name}")
        param.grad = update.clone()
        applied[name] = update

    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return applied
