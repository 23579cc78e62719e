"""
Federated Client
Purpose: Train the local model on one shard and package the single upload
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from data.datasets import LabeledImageDataset
from diffusion.schedule import linear_schedule
from diffusion.trainer import TrainConfig, train_local_diffusion
from errors import ArgumentError
from federation.classifier_training import classifier_config_for, train_classifier
from models.checkpoint import ModelCheckpoint
from models.denoiser import DenoiserConfig
from privacy.accountant import PrivacyLedger, PrivacySpec, split_budget
from quality.fourier import MagnitudeProfile, mean_magnitude

logger = logging.getLogger(__name__)

CLIENT_METHODS = ("feddiff", "classifier-local")


@dataclass
class ClientPayload:
    """Everything one client sends to the server, exactly once"""
    client_id: int
    checkpoint: ModelCheckpoint
    label_counts: np.ndarray
    magnitude_profile: Optional[MagnitudeProfile] = None
    ledger: Optional[PrivacyLedger] = None

    def __post_init__(self):
        self.label_counts = np.asarray(self.label_counts, dtype=np.int64)

    @property
    def sample_count(self) -> int:
        return int(self.label_counts.sum())

    def spent_epsilon(self) -> float:
        """DP-SGD epsilon plus the magnitude release, composed additively"""
        total = self.ledger.spent_epsilon() if self.ledger is not None else 0.0
        if self.magnitude_profile is not None:
            total += self.magnitude_profile.dp_epsilon_spent
        return float(total)

    def size_bytes(self) -> int:
        size = self.checkpoint.payload_size_bytes() + self.label_counts.size * 8
        if self.magnitude_profile is not None:
            size += self.magnitude_profile.mean_magnitude.size * 4
        return int(size)


def client_privacy(privacy: Optional[PrivacySpec], fmf: bool, fmf_share: float):
    """(DP-SGD spec, magnitude epsilon) for one client"""
    if privacy is None:
        return None, None
    if not fmf:
        return privacy, None
    dpsgd_epsilon, fmf_epsilon = split_budget(privacy.epsilon_target, fmf_share)
    spec = PrivacySpec(
        epsilon_target=dpsgd_epsilon,
        delta=privacy.delta,
        clip_norm=privacy.clip_norm,
        sample_rate=privacy.sample_rate,
        noise_multiplier=privacy.noise_multiplier,
    )
    return spec, fmf_epsilon


def run_client(client_id: int,
               shard: LabeledImageDataset,
               method: str,
               train_config: TrainConfig,
               model_size: str = "default",
               timesteps: int = 1000,
               privacy: Optional[PrivacySpec] = None,
               fmf: bool = False,
               fmf_share: float = 0.05,
               history_path=None) -> ClientPayload:
    """
    Run one client end to end

    Args:
        client_id: Client identifier
        shard: The client's local data
        method: "feddiff" trains a class-conditioned denoiser, "classifier-local"
                trains a classifier for the FedAvg / ensemble baselines
        train_config: Local epochs, batch size, learning rate, seed
        model_size: Denoiser size, "default" or "small"
        timesteps: Diffusion steps T
        privacy: Optional client budget
        fmf: Attach the mean magnitude profile
        fmf_share: Share of the budget spent on the profile under DP
        history_path: Optional loss-history CSV

    Returns:
        ClientPayload with one checkpoint and the shard's label counts
    """
    if method not in CLIENT_METHODS:
        raise ArgumentError(f"method must be one of {CLIENT_METHODS}, got {method!r}")
    if len(shard) == 0:
        raise ArgumentError(f"client {client_id} has an empty shard")

    spec, fmf_epsilon = client_privacy(privacy, fmf, fmf_share)
    logger.info("Client %d: training %s on %d samples%s", client_id, method, len(shard),
                f" under eps={spec.epsilon_target:.2f}" if spec else "")

    if method == "feddiff":
        height, _, channels = shard.image_shape
        model_config = DenoiserConfig.sized(
            model_size, image_size=height, image_channels=channels,
            class_count=shard.class_count, timesteps=timesteps, seed=train_config.seed,
        )
        checkpoint = train_local_diffusion(shard, model_config, linear_schedule(timesteps), train_config,
                                           privacy=spec, history_path=history_path)
    else:
        checkpoint = train_classifier(shard, classifier_config_for(shard, train_config.seed), train_config,
                                      privacy=spec)

    profile = None
    if fmf:
        rng = np.random.default_rng([train_config.seed, client_id])
        profile = mean_magnitude(shard.images, client_id=client_id, epsilon=fmf_epsilon, rng=rng)

    ledger = None
    if "ledger" in checkpoint.metadata:
        ledger = PrivacyLedger.from_dict(checkpoint.metadata["ledger"])

    return ClientPayload(
        client_id=client_id,
        checkpoint=checkpoint,
        label_counts=shard.label_counts(),
        magnitude_profile=profile,
        ledger=ledger,
    )

