import json

import numpy as np
import pandas as pd
import pytest

from audit.memorization import MemorizationReport, audit_generator, memorization_scores, render_histogram
from diffusion.schedule import linear_schedule
from errors import ArgumentError
from federation.client import ClientPayload
from models.checkpoint import ModelCheckpoint
from models.denoiser import build_denoiser

from conftest import make_dataset


def brute_force_scores(generated, train, n, alpha):
    gen = generated.reshape(generated.shape[0], -1)
    ref = train.reshape(train.shape[0], -1)
    scores = []
    for x in gen:
        distances = [np.linalg.norm(x - r) for r in ref]
        anchor = int(np.argmin(distances))
        neighbors = sorted(np.linalg.norm(ref[anchor] - r) for j, r in enumerate(ref) if j != anchor)
        scores.append(distances[anchor] / (alpha * np.mean(neighbors[:n])))
    return np.array(scores)


def test_scalar_example():
    # nearest training point 0 at distance 0.1; its two neighbors 1 and 2 average 1.5
    train = np.array([[0.0], [1.0], [2.0], [3.0]])
    report = memorization_scores(np.array([[0.1]]), train, n=2, alpha=0.5)
    assert report.scores[0] == pytest.approx(0.1 / (0.5 * 1.5))
    assert report.nearest_train_index[0] == 0


def test_planted_copy_is_flagged():
    train = make_dataset(count=80, seed=0)
    generated = make_dataset(count=20, seed=1).images.copy()
    generated[7] = train.images[5]
    report = memorization_scores(generated, train, n=10)
    assert report.scores[7] == 0.0
    assert report.nearest_train_index[7] == 5
    assert 7 in report.flagged_indices
    assert report.min_score == 0.0
    assert report.lowest(1)[0] == 7


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    train = rng.random((60, 2, 2, 2))
    generated = rng.random((200, 2, 2, 2))
    report = memorization_scores(generated, train, n=5, alpha=0.5)
    np.testing.assert_allclose(report.scores, brute_force_scores(generated, train, 5, 0.5), rtol=1e-9)


def test_scores_are_scale_invariant():
    rng = np.random.default_rng(1)
    train = rng.random((40, 3, 3, 1))
    generated = rng.random((30, 3, 3, 1))
    base = memorization_scores(generated, train, n=4).scores
    scaled = memorization_scores(3.5 * generated, 3.5 * train, n=4).scores
    np.testing.assert_allclose(scaled, base, rtol=1e-9)


def test_zero_density_anchor():
    train = np.zeros((4, 1))
    report = memorization_scores(np.array([[0.0], [0.5]]), train, n=2)
    assert report.scores[0] == 0.0
    assert np.isinf(report.scores[1])


def test_neighborhood_must_fit_training_set():
    with pytest.raises(ArgumentError):
        memorization_scores(np.zeros((2, 1)), np.zeros((50, 1)), n=50)


def test_dimension_mismatch():
    with pytest.raises(ArgumentError):
        memorization_scores(np.zeros((2, 4)), np.zeros((10, 5)), n=2)


def test_report_save_and_histogram(tmp_path):
    rng = np.random.default_rng(2)
    report = memorization_scores(rng.random((100, 4)), rng.random((30, 4)), n=3)
    report.save(tmp_path)
    payload = json.loads((tmp_path / "audit_report.json").read_text())
    assert payload["count"] == 100
    assert payload["flagged_count"] == report.flagged_count
    assert len(payload["lowest_pairs"]) == 30

    hist = pd.read_csv(tmp_path / "audit_hist.csv")
    assert list(hist.columns) == ["bin_low", "bin_high", "count"]
    assert int(hist["count"].sum()) == 100
    assert render_histogram(report, tmp_path / "audit_hist.png").exists()


def test_flagging_uses_threshold():
    report = MemorizationReport(scores=np.array([0.2, 1.0, 3.0]), nearest_train_index=np.zeros(3, dtype=np.int64),
                                threshold=1.0)
    np.testing.assert_array_equal(report.flagged_indices, [0])


def test_audit_generator_writes_artifacts(tmp_path, tiny_denoiser_config):
    checkpoint = ModelCheckpoint.from_model(build_denoiser(tiny_denoiser_config),
                                            {"schedule": linear_schedule(20).to_dict()})
    train = make_dataset(count=60)
    payload = ClientPayload(client_id=0, checkpoint=checkpoint, label_counts=train.label_counts())

    report, generated = audit_generator(payload, train, oversample=1, steps=2, n=10, output_dir=tmp_path)
    assert generated.shape == (60, 8, 8, 1)
    assert report.scores.shape == (60,)
    for name in ("audit_report.json", "audit_hist.csv", "nearest_pairs.png", "audit_hist.png"):
        assert (tmp_path / name).exists()
