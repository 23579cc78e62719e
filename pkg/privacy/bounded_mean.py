"""
DP Bounded Mean
Laplace release of a mean over values clamped to [lower, upper]: the budget is
split evenly between the noisy sum (sensitivity upper - lower) and the noisy
count (sensitivity 1), and the released count is floored at 1.
"""

from typing import Optional

import numpy as np

from errors import ArgumentError


def dp_bounded_mean(values,
                    lower: float,
                    upper: float,
                    epsilon: float,
                    rng: Optional[np.random.Generator] = None,
                    axis: int = 0) -> np.ndarray:
    """
    Differentially private mean

    Args:
        values: Array; the mean is taken along axis, every other position is an
                independent query with budget epsilon
        lower: Lower clamp bound L
        upper: Upper clamp bound U (> L)
        epsilon: Budget of each query
        rng: numpy random generator

    Returns:
        Noised mean (scalar array for 1-D input)
    """
    if lower >= upper:
        raise ArgumentError(f"need lower < upper, got [{lower}, {upper}]")
    if epsilon <= 0:
        raise ArgumentError(f"epsilon must be positive, got {epsilon}")
    rng = rng or np.random.default_rng()

    clamped = np.clip(np.asarray(values, dtype=np.float64), lower, upper)
    count = clamped.shape[axis]
    total = clamped.sum(axis=axis)

    eps_sum = eps_count = epsilon / 2.0
    noisy_sum = total + rng.laplace(0.0, (upper - lower) / eps_sum, size=np.shape(total))
    noisy_count = count + rng.laplace(0.0, 1.0 / eps_count, size=np.shape(total))
    return noisy_sum / np.maximum(1.0, noisy_count)
