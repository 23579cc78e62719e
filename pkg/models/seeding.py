"""
Seeded Initialization
Model constructors draw from torch's global generator; clients built on
worker threads take turns so each initialization sees only its own seed.
"""

import threading
from contextlib import contextmanager

import torch

_INIT_LOCK = threading.Lock()


@contextmanager
def seeded(seed: int):
    with _INIT_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
