"""
Global Classifier
Purpose: Pre-activation residual network ("ResNet16") for 32x32 inputs

Stem convolution, three stages of (2, 2, 3) basic blocks, group normalization,
global average pooling and a linear head: 16 weighted layers in the main path.
"""

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError
from models.seeding import seeded

GROUPS = 8


@dataclass
class ClassifierConfig:
    depth: str = "resnet16"
    image_size: int = 32
    image_channels: int = 1
    class_count: int = 10
    stem_width: int = 64
    widths: Tuple[int, int, int] = (96, 192, 320)
    blocks: Tuple[int, int, int] = (2, 2, 3)
    seed: int = 0

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["widths"] = list(self.widths)
        payload["blocks"] = list(self.blocks)
        payload["kind"] = "classifier"
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ClassifierConfig":
        values = {k: v for k, v in payload.items() if k != "kind"}
        values["widths"] = tuple(values["widths"])
        values["blocks"] = tuple(values["blocks"])
        return cls(**values)

    def validate(self):
        if self.depth != "resnet16":
            raise ConfigError(f"Unsupported classifier depth {self.depth!r}")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if any(w % GROUPS for w in (self.stem_width,) + tuple(self.widths)):
            raise ConfigError(f"widths must be multiples of {GROUPS} for group normalization")


class PreActBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(GROUPS, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.norm1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.norm2(out)))
        return out + shortcut


class ClassifierModel(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        config.validate()
        self.config = config

        self.stem = nn.Conv2d(config.image_channels, config.stem_width, kernel_size=3, padding=1, bias=False)
        layers = []
        in_channels = config.stem_width
        for width, count in zip(config.widths, config.blocks):
            for i in range(count):
                layers.append(PreActBlock(in_channels, width, stride=2 if i == 0 else 1))
                in_channels = width
        self.layers = nn.Sequential(*layers)
        self.norm = nn.GroupNorm(GROUPS, in_channels)
        self.head = nn.Linear(in_channels, config.class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """batch x Ch x H x W images in [-1, 1] -> batch x K scores"""
        out = self.layers(self.stem(x))
        out = F.relu(self.norm(out))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


def build_classifier(config: ClassifierConfig) -> ClassifierModel:
    """Build a classifier with deterministic initialization under config.seed"""
    config.validate()
    with seeded(config.seed):
        return ClassifierModel(config)
