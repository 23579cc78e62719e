from pathlib import Path

import pytest

from config.config import build_experiment_config, config as runtime_config
from data.datasets import save_dataset
from harness.reporting import emit_table
from orchestrator import run_experiment

from conftest import make_dataset

FASHION_TRAIN = Path(runtime_config.DATA_ROOT) / "fashionmnist" / "train"


def csv_bytes(root: Path):
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(root.rglob("*.csv"))}


# ========== REPEATABILITY ==========

def test_repeat_runs_are_identical(tmp_path):
    data_root = tmp_path / "datasets"
    save_dataset(make_dataset(count=120, seed=0), data_root / "custom" / "train")
    save_dataset(make_dataset(count=20, seed=1), data_root / "custom" / "test")

    runs = []
    for name in ("first", "second"):
        experiment = build_experiment_config(overrides=dict(
            dataset="custom", data_root=str(data_root), client_count=2, alpha=1.0,
            local_epochs=1, global_epochs=1, batch_size=32, seeds=[0, 1], timesteps=10,
            sampling_steps=2, model_size="small", sample_batch_size=64, filter="fmf",
            workers=2, output_dir=str(tmp_path / name),
        ))
        result = run_experiment(experiment)
        emit_table([result], "alpha", tmp_path / name)
        runs.append(result)

    assert runs[0].status == runs[1].status == "ok"
    assert runs[0].accuracies == runs[1].accuracies
    first, second = csv_bytes(tmp_path / "first"), csv_bytes(tmp_path / "second")
    assert "table_alpha.csv" in first
    assert any(name.endswith("fmf_report.csv") for name in first)
    assert first == second


# ========== DESK-SCALE REPRODUCTION ==========

needs_fashionmnist = pytest.mark.skipif(
    not FASHION_TRAIN.is_dir(), reason=f"FashionMNIST not ingested under {FASHION_TRAIN.parent}"
)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Desk-preset results keyed by variant, computed once per module"""
    cache = {}
    variants = {
        "feddiff": {},
        "fedavg": {"method": "fedavg"},
        "dp": {"privacy": {"epsilon": 10.0, "delta": 1e-5, "clip_norm": 1.0}},
        "dp+fmf": {"privacy": {"epsilon": 10.0, "delta": 1e-5, "clip_norm": 1.0},
                   "filter": "fmf", "fmf": {"gamma": 0.05}},
    }

    def get(variant):
        if variant not in cache:
            output = tmp_path_factory.mktemp(variant.replace("+", "_"))
            experiment = build_experiment_config(
                "desk", overrides={**variants[variant], "output_dir": str(output)}
            )
            cache[variant] = run_experiment(experiment)
        return cache[variant]

    return get


@pytest.mark.slow
@needs_fashionmnist
def test_feddiff_beats_fedavg_under_label_skew(desk_runs):
    feddiff, fedavg = desk_runs("feddiff"), desk_runs("fedavg")
    assert len(feddiff.accuracies) == len(fedavg.accuracies) == 3
    assert feddiff.mean >= 0.70
    assert feddiff.mean - fedavg.mean >= 0.20


@pytest.mark.slow
@needs_fashionmnist
def test_dp_feddiff_stays_useful(desk_runs):
    private, plain = desk_runs("dp"), desk_runs("feddiff")
    assert private.status == "ok"
    assert private.privacy_spent <= 10.0
    assert private.mean > 0.30
    assert private.mean <= plain.mean


@pytest.mark.slow
@needs_fashionmnist
def test_fmf_does_not_hurt_under_dp(desk_runs):
    filtered, unfiltered = desk_runs("dp+fmf"), desk_runs("dp")
    assert filtered.privacy_spent <= 10.0
    assert filtered.mean - unfiltered.mean >= -0.01
