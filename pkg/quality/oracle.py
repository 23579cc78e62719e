"""
Oracle Filtering
Keep only the synthetic samples a centrally trained classifier labels the
same way they were generated
"""

import logging

import numpy as np

from federation.classifier_training import predict_probabilities
from federation.server import SyntheticDataset

logger = logging.getLogger(__name__)


def oracle_filter(synthetic: SyntheticDataset, oracle, device: str = "cpu") -> SyntheticDataset:
    """
    Args:
        synthetic: Generated dataset with provenance
        oracle: Classifier trained on the pooled real training set
        device: Device for inference

    Returns:
        The samples whose oracle prediction matches their label
    """
    if len(synthetic) == 0:
        return synthetic
    predictions = predict_probabilities(oracle, synthetic.dataset.images, device).argmax(axis=1)
    kept = np.flatnonzero(predictions == synthetic.dataset.labels)
    if kept.size == 0:
        logger.warning("Oracle rejected every synthetic sample")
    logger.info("Oracle filter kept %d of %d samples", kept.size, len(synthetic))
    return synthetic.select(kept)
