"""
Privacy Accounting
Purpose: Renyi-DP accounting of the Poisson-subsampled Gaussian mechanism,
conversion to (epsilon, delta), noise calibration and the ledger every DP
client carries
Uses: opacus' RDP analysis of the sampled Gaussian mechanism
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from opacus.accountants.analysis.rdp import compute_rdp

from errors import ArgumentError, CalibrationError, ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: Tuple[float, ...] = tuple([1 + x / 10.0 for x in range(1, 100)] + list(range(12, 64)) + [128, 256])
SIGMA_BRACKET = (1e-2, 1e2)


@dataclass
class PrivacySpec:
    """Target (epsilon, delta), clip norm, sampling rate and noise multiplier of one DP training run"""
    epsilon_target: float
    delta: float = 1e-5
    clip_norm: float = 1.0
    sample_rate: float = 1.0
    noise_multiplier: Optional[float] = None

    def __post_init__(self):
        if self.epsilon_target <= 0:
            raise ConfigError(f"epsilon_target must be positive, got {self.epsilon_target}")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if not (0.0 < self.sample_rate <= 1.0):
            raise ConfigError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ConfigError(f"noise_multiplier must be nonnegative, got {self.noise_multiplier}")

    def to_dict(self) -> dict:
        return {
            "epsilon_target": self.epsilon_target,
            "delta": self.delta,
            "clip_norm": self.clip_norm,
            "sample_rate": self.sample_rate,
            "noise_multiplier": self.noise_multiplier,
        }


def rdp_epsilon(events: Sequence[Tuple[float, float, int]],
                delta: float,
                orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """
    Spent epsilon of composed subsampled Gaussian mechanisms

    RDP is summed over events and converted with
    epsilon = min_alpha [RDP(alpha) + log(1/delta) / (alpha - 1)].

    Args:
        events: (sample_rate q, noise_multiplier sigma, steps) triples
        delta: Target delta
        orders: Renyi orders alpha > 1

    Returns:
        Spent epsilon (0 for no steps)
    """
    orders = np.asarray(list(orders), dtype=np.float64)
    if orders.size == 0:
        raise ConfigError("RDP order grid is empty")
    if np.any(orders <= 1):
        raise ConfigError("RDP orders must be > 1")

    total = np.zeros_like(orders)
    for q, sigma, steps in events:
        if steps <= 0:
            continue
        if sigma <= 0:
            raise ArgumentError(f"noise multiplier must be positive for accounting, got {sigma}")
        total = total + np.asarray(compute_rdp(q=q, noise_multiplier=sigma, steps=int(steps), orders=orders))

    if not np.any(total):
        return 0.0
    eps = total + math.log(1.0 / delta) / (orders - 1.0)
    return float(np.nanmin(eps))


def max_steps_within_budget(epsilon_target: float, delta: float, q: float, sigma: float,
                            orders: Sequence[float] = DEFAULT_ORDERS,
                            already_spent: Sequence[Tuple[float, float, int]] = ()) -> int:
    """Largest number of additional steps keeping spent epsilon <= target"""
    def spent(steps: int) -> float:
        return rdp_epsilon(list(already_spent) + [(q, sigma, steps)], delta, orders)

    if spent(1) > epsilon_target:
        return 0
    low, high = 1, 2
    while spent(high) <= epsilon_target:
        low, high = high, high * 2
        if high > 10 ** 9:
            return high
    while high - low > 1:
        mid = (low + high) // 2
        if spent(mid) <= epsilon_target:
            low = mid
        else:
            high = mid
    return low


def calibrate_noise(epsilon_target: float, delta: float, q: float, total_steps: int,
                    orders: Sequence[float] = DEFAULT_ORDERS,
                    tolerance: float = 0.01) -> float:
    """
    Smallest noise multiplier whose spent epsilon lands within
    [(1 - tolerance) * target, target] after total_steps

    A budget so loose that even the bracket floor SIGMA_BRACKET[0] spends
    no more than the target is clamped to that floor; the spent epsilon then
    sits below the tolerance window.

    Args:
        epsilon_target: Target epsilon
        delta: Target delta
        q: Poisson sampling rate
        total_steps: Number of DP-SGD steps

    Returns:
        Noise multiplier sigma
    """
    if total_steps < 1:
        raise CalibrationError(f"total_steps must be >= 1, got {total_steps}")
    low, high = SIGMA_BRACKET

    def spent(sigma: float) -> float:
        return rdp_epsilon([(q, sigma, total_steps)], delta, orders)

    if spent(high) > epsilon_target:
        raise CalibrationError(
            f"epsilon {epsilon_target} unreachable with sigma <= {high} (q={q}, steps={total_steps})"
        )
    if spent(low) <= epsilon_target:
        logger.info("Budget loose: eps=%.3f not reached at sigma=%.3g (spent %.3f); clamped to the bracket floor",
                    epsilon_target, low, spent(low))
        return low

    # spent() is nonincreasing in sigma: keep spent(low) > target >= spent(high)
    for _ in range(200):
        if spent(high) >= (1.0 - tolerance) * epsilon_target:
            break
        mid = 0.5 * (low + high)
        if spent(mid) > epsilon_target:
            low = mid
        else:
            high = mid
    logger.debug("Calibrated sigma=%.5f for eps=%.3f (q=%.5f, steps=%d)", high, epsilon_target, q, total_steps)
    return high


@dataclass
class PrivacyLedger:
    """Mechanism events of one training run; spent epsilon is derived from them"""
    delta: float = 1e-5
    orders: List[float] = field(default_factory=lambda: list(DEFAULT_ORDERS))
    events: List[List[float]] = field(default_factory=list)

    def record(self, q: float, sigma: float, steps: int = 1):
        if self.events and self.events[-1][0] == q and self.events[-1][1] == sigma:
            self.events[-1][2] += steps
        else:
            self.events.append([float(q), float(sigma), int(steps)])

    @property
    def steps(self) -> int:
        return int(sum(e[2] for e in self.events))

    def event_tuples(self) -> List[Tuple[float, float, int]]:
        return [(q, sigma, int(steps)) for q, sigma, steps in self.events]

    def spent_epsilon(self, delta: float = None) -> float:
        return rdp_epsilon(self.event_tuples(), delta or self.delta, self.orders)

    def to_dict(self) -> Dict:
        return {
            "events": [list(e) for e in self.events],
            "orders": list(self.orders),
            "delta": self.delta,
            "spent_epsilon": self.spent_epsilon(),
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "PrivacyLedger":
        return cls(
            delta=float(payload["delta"]),
            orders=[float(o) for o in payload["orders"]],
            events=[[float(q), float(s), int(n)] for q, s, n in payload["events"]],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> "PrivacyLedger":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def split_budget(epsilon: float, fmf_share: float = 0.05) -> Tuple[float, float]:
    """(DP-SGD epsilon, magnitude-release epsilon) under basic composition"""
    if not (0.0 <= fmf_share < 1.0):
        raise ConfigError(f"fmf_share must lie in [0, 1), got {fmf_share}")
    return epsilon * (1.0 - fmf_share), epsilon * fmf_share
