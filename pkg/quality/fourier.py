"""
Fourier Magnitude Filtering
Purpose: Summarize each client's data by its mean DFT magnitude, score
generated samples against it and drop the worst-scoring fraction
Uses: numpy.fft, pandas for the per-sample report

Bins stay in the transform's natural order (no fftshift); channels are
transformed independently and pooled into one score.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from errors import ArgumentError, FilterError, IngestionError
from federation.server import SyntheticDataset
from privacy.bounded_mean import dp_bounded_mean

logger = logging.getLogger(__name__)

MAGNITUDE_FILE = "magnitude.bin"
MAGNITUDE_META_FILE = "magnitude_meta.json"
REPORT_FILE = "fmf_report.csv"


@dataclass
class MagnitudeProfile:
    """Mean DFT magnitude (H x W x Ch) of one client's samples"""
    mean_magnitude: np.ndarray
    client_id: int = 0
    dp_epsilon_spent: float = 0.0

    def __post_init__(self):
        self.mean_magnitude = np.maximum(np.asarray(self.mean_magnitude, dtype=np.float64), 0.0)
        if self.mean_magnitude.ndim != 3:
            raise ArgumentError(f"magnitude profile must be H x W x Ch, got {self.mean_magnitude.shape}")

    @property
    def shape(self):
        return tuple(self.mean_magnitude.shape)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.mean_magnitude.astype("<f4").tofile(directory / MAGNITUDE_FILE)
        with open(directory / MAGNITUDE_META_FILE, "w", encoding="utf-8") as f:
            json.dump({
                "shape": list(self.shape),
                "client_id": int(self.client_id),
                "dp_epsilon_spent": float(self.dp_epsilon_spent),
            }, f, indent=2)
        return directory

    @classmethod
    def load(cls, directory) -> "MagnitudeProfile":
        directory = Path(directory)
        try:
            with open(directory / MAGNITUDE_META_FILE, "r", encoding="utf-8") as f:
                meta = json.load(f)
            values = np.fromfile(directory / MAGNITUDE_FILE, dtype="<f4").reshape(meta["shape"])
        except (OSError, ValueError, KeyError) as e:
            raise IngestionError(f"Failed to load magnitude profile from {directory}: {e}",
                                 path=str(directory)) from e
        return cls(values, client_id=int(meta.get("client_id", 0)),
                   dp_epsilon_spent=float(meta.get("dp_epsilon_spent", 0.0)))


def magnitude_spectrum(images: np.ndarray) -> np.ndarray:
    """|DFT| per image and channel; images are count x H x W x Ch"""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ArgumentError(f"expected count x H x W x Ch images, got shape {images.shape}")
    return np.abs(np.fft.fft2(images, axes=(1, 2)))


def magnitude_bounds(image_shape) -> tuple:
    """Per-bin clamp range for pixels in [0, 1]: [0, H * W]"""
    height, width = image_shape[0], image_shape[1]
    return 0.0, float(height * width)


def mean_magnitude(images: np.ndarray,
                   client_id: int = 0,
                   epsilon: Optional[float] = None,
                   rng: Optional[np.random.Generator] = None) -> MagnitudeProfile:
    """
    Average magnitude spectrum of a client's samples

    Args:
        images: count x H x W x Ch in [0, 1]
        client_id: Owner of the samples
        epsilon: Optional budget of the whole release; each of the H*W*Ch bins
                 is a bounded-mean query with an equal share
        rng: numpy random generator for the DP noise

    Returns:
        MagnitudeProfile
    """
    spectrum = magnitude_spectrum(images)
    if spectrum.shape[0] == 0:
        raise ArgumentError("mean_magnitude needs at least one image")

    if epsilon is None:
        return MagnitudeProfile(spectrum.mean(axis=0), client_id=client_id)

    bins = int(np.prod(spectrum.shape[1:]))
    lower, upper = magnitude_bounds(spectrum.shape[1:])
    noised = dp_bounded_mean(spectrum, lower, upper, epsilon / bins, rng=rng, axis=0)
    return MagnitudeProfile(noised, client_id=client_id, dp_epsilon_spent=float(epsilon))


def sample_scores(images: np.ndarray, profile: MagnitudeProfile) -> np.ndarray:
    """Euclidean distance between each image's magnitude and the profile"""
    spectrum = magnitude_spectrum(images)
    if spectrum.shape[1:] != profile.shape:
        raise ArgumentError(f"image shape {spectrum.shape[1:]} does not match profile shape {profile.shape}")
    diff = spectrum - profile.mean_magnitude[None]
    return np.sqrt((diff ** 2).reshape(diff.shape[0], -1).sum(axis=1))


def sample_score(z: np.ndarray, profile: MagnitudeProfile) -> float:
    """Score of one H x W x Ch image"""
    return float(sample_scores(np.asarray(z)[None], profile)[0])


# ========== FILTERING ==========

def score_synthetic(synthetic: SyntheticDataset, profiles: Dict[int, MagnitudeProfile]) -> np.ndarray:
    """Score every sample against the profile of the client that generated it"""
    scores = np.zeros(len(synthetic), dtype=np.float64)
    for client_id in np.unique(synthetic.sources):
        if int(client_id) not in profiles:
            raise FilterError(f"no magnitude profile for client {int(client_id)}", client_id=int(client_id))
        rows = np.flatnonzero(synthetic.sources == client_id)
        scores[rows] = sample_scores(synthetic.dataset.images[rows], profiles[int(client_id)])
    return scores


def removal_mask(scores: np.ndarray, groups: np.ndarray, gamma: float) -> np.ndarray:
    """
    Mark floor(gamma * group size) highest scores in every group; ties are
    removed in ascending index order
    """
    if not (0.0 <= gamma < 1.0):
        raise ArgumentError(f"gamma must lie in [0, 1), got {gamma}")
    removed = np.zeros(scores.shape[0], dtype=bool)
    for group in np.unique(groups):
        rows = np.flatnonzero(groups == group)
        quota = int(np.floor(gamma * rows.size))
        if quota == 0:
            continue
        order = np.lexsort((rows, -scores[rows]))
        removed[rows[order[:quota]]] = True
    return removed


def fmf_report(synthetic: SyntheticDataset, scores: np.ndarray, removed: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({
        "client_id": synthetic.sources.astype(int),
        "index": np.arange(len(synthetic)),
        "s": scores,
        "removed": removed,
    })


def fmf_filter(synthetic: SyntheticDataset,
               profiles: Dict[int, MagnitudeProfile],
               gamma: float = 0.05,
               scope: str = "client",
               report_path=None) -> SyntheticDataset:
    """
    Drop the highest-scoring generated samples

    Args:
        synthetic: Generated dataset with provenance
        profiles: client_id -> MagnitudeProfile
        gamma: Fraction removed, in [0, 1)
        scope: "client" removes floor(gamma * count_c) per client, "global"
               ranks the pooled set
        report_path: Optional fmf_report.csv destination

    Returns:
        Kept samples with their scores attached
    """
    if scope not in ("client", "global"):
        raise ArgumentError(f"scope must be 'client' or 'global', got {scope!r}")
    scores = score_synthetic(synthetic, profiles)
    groups = synthetic.sources if scope == "client" else np.zeros(len(synthetic), dtype=np.int64)
    removed = removal_mask(scores, groups, gamma)

    if report_path is not None:
        path = Path(report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fmf_report(synthetic, scores, removed).to_csv(path, index=False)

    logger.info("FMF (%s scope, gamma=%.3f) removed %d of %d samples",
                scope, gamma, int(removed.sum()), len(synthetic))
    scored = synthetic.with_scores(scores)
    return scored.select(np.flatnonzero(~removed))
