"""
Model Checkpoints
Portable snapshot of a network: config descriptor, named float32 parameter
arrays and training metadata. On disk: config.json, meta.json and one
little-endian float32 blob per parameter under params/.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import torch
import torch.nn as nn

from errors import ConfigError, IngestionError
from models.classifier import ClassifierConfig, ClassifierModel, build_classifier
from models.denoiser import ConditionalDenoiser, DenoiserConfig, build_denoiser

ModelConfig = Union[DenoiserConfig, ClassifierConfig]

PARAMS_DIR = "params"
INDEX_FILE = "index.json"

# local bookkeeping, not part of what a client uploads
LOCAL_METADATA = ("loss_history", "train_seconds")


def build_model(config: ModelConfig) -> nn.Module:
    if isinstance(config, DenoiserConfig):
        return build_denoiser(config)
    if isinstance(config, ClassifierConfig):
        return build_classifier(config)
    raise ConfigError(f"Unknown model config type {type(config).__name__}")


def config_from_dict(payload: Dict[str, Any]) -> ModelConfig:
    kind = payload.get("kind")
    if kind == "denoiser":
        return DenoiserConfig.from_dict(payload)
    if kind == "classifier":
        return ClassifierConfig.from_dict(payload)
    raise ConfigError(f"Unknown architecture kind {kind!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class ModelCheckpoint:
    architecture: Dict[str, Any]
    params: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.architecture["kind"]

    @classmethod
    def from_model(cls, model: nn.Module, metadata: Dict[str, Any] = None) -> "ModelCheckpoint":
        params = {
            name: tensor.detach().to("cpu", torch.float32).numpy().copy()
            for name, tensor in model.state_dict().items()
        }
        return cls(architecture=model.config.to_dict(), params=params, metadata=dict(metadata or {}))

    def to_model(self, device: str = "cpu") -> nn.Module:
        model = build_model(config_from_dict(self.architecture))
        state = {name: torch.from_numpy(array.copy()) for name, array in self.params.items()}
        try:
            model.load_state_dict(state)
        except RuntimeError as e:
            raise ConfigError(f"Checkpoint does not match its architecture: {e}") from e
        return model.to(device)

    def parameter_count(self) -> int:
        return int(sum(array.size for array in self.params.values()))

    def payload_size_bytes(self) -> int:
        """Bytes uploaded once: float32 parameters plus the JSON descriptors"""
        blobs = sum(array.size * 4 for array in self.params.values())
        uploaded = {k: v for k, v in self.metadata.items() if k not in LOCAL_METADATA}
        descriptors = len(json.dumps(self.architecture)) + len(json.dumps(uploaded, default=str))
        return int(blobs + descriptors)

    def same_architecture(self, other: "ModelCheckpoint") -> bool:
        mine = {k: v for k, v in self.architecture.items() if k != "seed"}
        theirs = {k: v for k, v in other.architecture.items() if k != "seed"}
        return mine == theirs

    # ========== PERSISTENCE ==========

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / PARAMS_DIR).mkdir(parents=True, exist_ok=True)

        index = {}
        for position, (name, array) in enumerate(self.params.items()):
            blob = f"{position:04d}.bin"
            np.ascontiguousarray(array, dtype="<f4").tofile(directory / PARAMS_DIR / blob)
            index[name] = {"file": blob, "shape": list(array.shape)}

        with open(directory / "config.json", "w", encoding="utf-8") as f:
            json.dump(self.architecture, f, indent=2)
        with open(directory / "meta.json", "w", encoding="utf-8") as f:
            json.dump(self.metadata, f, indent=2, default=str)
        with open(directory / PARAMS_DIR / INDEX_FILE, "w", encoding="utf-8") as f:
            json.dump(index, f, indent=2)
        return directory

    @classmethod
    def load(cls, directory) -> "ModelCheckpoint":
        directory = Path(directory)
        try:
            with open(directory / "config.json", "r", encoding="utf-8") as f:
                architecture = json.load(f)
            with open(directory / "meta.json", "r", encoding="utf-8") as f:
                metadata = json.load(f)
            with open(directory / PARAMS_DIR / INDEX_FILE, "r", encoding="utf-8") as f:
                index = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise IngestionError(f"Failed to load checkpoint {directory}: {e}", path=str(directory)) from e

        params = {}
        for name, entry in index.items():
            path = directory / PARAMS_DIR / entry["file"]
            array = np.fromfile(path, dtype="<f4")
            expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
            if array.size != expected:
                raise IngestionError(f"Corrupt parameter blob {path}", path=str(path))
            params[name] = array.reshape(entry["shape"]).astype(np.float32)
        return cls(architecture=architecture, params=params, metadata=metadata)
