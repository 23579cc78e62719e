"""
FLOP Estimation
Multiply-accumulates of convolution and linear layers for one image,
counted as two operations each
"""

from typing import Tuple

import torch
import torch.nn as nn

from models.denoiser import ConditionalDenoiser


def _conv_macs(module: nn.Conv2d, output: torch.Tensor) -> int:
    kh, kw = module.kernel_size
    per_output = (module.in_channels // module.groups) * kh * kw
    return int(output[0].numel() * per_output)


def _linear_macs(module: nn.Linear, output: torch.Tensor) -> int:
    rows = output[0].numel() // module.out_features
    return int(rows * module.in_features * module.out_features)


@torch.no_grad()
def count_flops(model: nn.Module, input_shape: Tuple[int, int, int]) -> float:
    """
    Estimate MFLOPs of one forward pass on one image

    Args:
        model: ConditionalDenoiser or ClassifierModel
        input_shape: (channels, height, width)

    Returns:
        Millions of floating point operations (2 per multiply-accumulate)
    """
    macs = [0]

    def hook(module, inputs, output):
        if isinstance(module, nn.Conv2d):
            macs[0] += _conv_macs(module, output)
        elif isinstance(module, nn.Linear):
            macs[0] += _linear_macs(module, output)

    handles = [
        m.register_forward_hook(hook)
        for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))
    ]
    try:
        device = next(model.parameters()).device
        x = torch.zeros((1,) + tuple(input_shape), device=device)
        if isinstance(model, ConditionalDenoiser):
            y = torch.zeros(1, dtype=torch.long, device=device)
            t = torch.ones(1, dtype=torch.long, device=device)
            model(x, y, t)
        else:
            model(x)
    finally:
        for handle in handles:
            handle.remove()
    return 2.0 * macs[0] / 1e6
