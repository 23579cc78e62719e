import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn as nn

from diffusion.sampler import sample, strided_coefficients, timestep_subsequence
from diffusion.schedule import (
    diffusion_loss,
    forward_diffuse,
    linear_schedule,
    noise_prediction_loss,
    schedule_from_dict,
)
from diffusion.trainer import TrainConfig, train_local_diffusion
from errors import ArgumentError, BudgetExhaustedError, ConfigError
from models.denoiser import build_denoiser
from privacy.accountant import PrivacySpec


class ZeroModel(nn.Module):
    def forward(self, x, y, t):
        return torch.zeros_like(x)


class OracleModel(nn.Module):
    """Returns a fixed noise tensor"""

    def __init__(self, noise):
        super().__init__()
        self.noise = noise

    def forward(self, x, y, t):
        return self.noise


class ProbeModel(nn.Module):
    """Single scalar parameter scaling the noisy input"""

    def __init__(self):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(0.3, dtype=torch.float64))

    def forward(self, x, y, t):
        return self.scale * x


# ========== SCHEDULE ==========

def test_default_schedule_matches_product_loop():
    schedule = linear_schedule()
    product = 1.0
    for beta in np.linspace(1e-4, 0.02, 1000):
        product *= 1.0 - beta
    assert schedule.alpha_bars[-1] == pytest.approx(product, rel=1e-9)
    assert schedule.alpha_bars[-1] < 1e-3


def test_single_step_schedule():
    schedule = linear_schedule(T=1)
    np.testing.assert_allclose(schedule.betas, [1e-4])
    np.testing.assert_allclose(schedule.alpha_bars, [1 - 1e-4])


@pytest.mark.parametrize("T", [1, 10, 1000])
def test_schedule_invariants(T):
    schedule = linear_schedule(T=T)
    assert schedule.alpha_bars[0] == pytest.approx(1 - schedule.betas[0])
    assert np.all(np.diff(schedule.betas) > 0)
    assert np.all(np.diff(schedule.alpha_bars) < 0)


def test_schedule_parameter_order():
    with pytest.raises(ConfigError):
        linear_schedule(T=10, beta_start=0.02, beta_end=1e-4)


def test_schedule_dict_round_trip():
    schedule = linear_schedule(T=50)
    np.testing.assert_array_equal(schedule_from_dict(schedule.to_dict()).betas, schedule.betas)


# ========== FORWARD PROCESS ==========

def test_forward_diffuse_branches():
    schedule = linear_schedule(T=100)
    x0 = torch.rand(2, 1, 4, 4) * 2 - 1
    eps = torch.randn(2, 1, 4, 4)
    t = torch.tensor([10, 60])
    ab = torch.tensor(schedule.alpha_bars[t.numpy() - 1], dtype=torch.float32).view(-1, 1, 1, 1)
    assert torch.allclose(forward_diffuse(x0, t, torch.zeros_like(x0), schedule), ab.sqrt() * x0)
    assert torch.allclose(forward_diffuse(torch.zeros_like(x0), t, eps, schedule), (1 - ab).sqrt() * eps)


def test_forward_diffuse_rejects_bad_step():
    schedule = linear_schedule(T=10)
    x0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ArgumentError):
        forward_diffuse(x0, torch.tensor([11]), torch.zeros_like(x0), schedule)


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_closed_form_matches_iterated_kernel(t):
    schedule = linear_schedule()
    gen = torch.Generator().manual_seed(t)
    n = 100_000
    x0 = torch.full((n, 1, 1, 1), 0.7, dtype=torch.float64)

    closed = forward_diffuse(x0, torch.full((n,), t), torch.randn(x0.shape, generator=gen, dtype=torch.float64),
                             schedule)
    x = x0.clone()
    for s in range(t):
        beta = float(schedule.betas[s])
        x = np.sqrt(1 - beta) * x + np.sqrt(beta) * torch.randn(x.shape, generator=gen, dtype=torch.float64)

    ab = schedule.alpha_bars[t - 1]
    mean, var = np.sqrt(ab) * 0.7, 1 - ab
    for samples in (closed, x):
        assert float(samples.mean()) == pytest.approx(mean, abs=0.015)
        assert float(samples.var()) == pytest.approx(var, rel=0.02, abs=1e-6)
    assert float(closed.mean()) == pytest.approx(float(x.mean()), abs=0.02)
    assert float(closed.var()) == pytest.approx(float(x.var()), rel=0.02, abs=1e-6)


# ========== LOSS ==========

def test_perfect_denoiser_has_zero_loss():
    schedule = linear_schedule(T=10)
    x_t = torch.randn(3, 1, 2, 2)
    eps = torch.randn(3, 1, 2, 2)
    loss = noise_prediction_loss(OracleModel(eps), x_t, torch.zeros(3, dtype=torch.long), torch.ones(3), eps)
    assert float(loss) == 0.0


def test_zero_model_loss_is_mean_square_noise():
    eps = torch.tensor([[[[1.0, -2.0], [0.5, 0.0]]]])
    loss = noise_prediction_loss(ZeroModel(), torch.zeros_like(eps), torch.zeros(1, dtype=torch.long),
                                 torch.ones(1), eps)
    assert float(loss) == pytest.approx((1.0 + 4.0 + 0.25 + 0.0) / 4)


def test_diffusion_loss_nonnegative_and_finite(tiny_denoiser_config):
    schedule = linear_schedule(T=20)
    model = build_denoiser(tiny_denoiser_config)
    loss = diffusion_loss(model, torch.rand(4, 1, 8, 8) * 2 - 1, torch.tensor([0, 1, 0, 1]), schedule,
                          torch.Generator().manual_seed(0))
    assert torch.isfinite(loss) and float(loss) >= 0


def test_loss_gradient_matches_finite_differences():
    schedule = linear_schedule(T=10)
    model = ProbeModel()
    x0 = torch.rand(2, 1, 3, 3, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    t = torch.tensor([3, 7])
    y = torch.zeros(2, dtype=torch.long)
    x_t = forward_diffuse(x0, t, eps, schedule)

    loss = noise_prediction_loss(model, x_t, y, t, eps)
    loss.backward()
    analytic = float(model.scale.grad)

    h = 1e-6
    with torch.no_grad():
        model.scale += h
        up = float(noise_prediction_loss(model, x_t, y, t, eps))
        model.scale -= 2 * h
        down = float(noise_prediction_loss(model, x_t, y, t, eps))
    numeric = (up - down) / (2 * h)
    assert analytic == pytest.approx(numeric, rel=1e-3)


# ========== SAMPLING ==========

def test_timestep_subsequence():
    np.testing.assert_array_equal(timestep_subsequence(10, 10), np.arange(1, 11))
    np.testing.assert_array_equal(timestep_subsequence(1000, 1), [1000])
    np.testing.assert_array_equal(timestep_subsequence(1000, 4), [250, 500, 750, 1000])
    with pytest.raises(ArgumentError):
        timestep_subsequence(10, 11)


def test_full_length_coefficients_equal_schedule():
    schedule = linear_schedule(T=30)
    _, alphas, betas, alpha_bars = strided_coefficients(schedule, 30)
    np.testing.assert_array_equal(alphas, schedule.alphas)
    np.testing.assert_array_equal(betas, schedule.betas)


def test_strided_coefficients_compose_to_alpha_bar():
    schedule = linear_schedule(T=100)
    taus, alphas, _, _ = strided_coefficients(schedule, 7)
    assert np.prod(alphas) == pytest.approx(schedule.alpha_bars[taus[-1] - 1], rel=1e-12)


def test_zero_noise_deterministic_trajectory():
    schedule = linear_schedule(T=50)
    steps = 10
    gen = torch.Generator().manual_seed(3)
    out = sample(ZeroModel(), [0, 1], schedule, steps=steps, generator=gen,
                 image_shape=(1, 2, 2), stochastic=False)

    start = torch.randn((2, 1, 2, 2), generator=torch.Generator().manual_seed(3))
    _, alphas, _, _ = strided_coefficients(schedule, steps)
    expected = (start / float(np.sqrt(np.prod(alphas)))).clamp(-1, 1)
    assert torch.allclose(out, expected, atol=1e-5)


def test_sample_rejects_too_many_steps():
    with pytest.raises(ArgumentError):
        sample(ZeroModel(), [0], linear_schedule(T=10), steps=11, image_shape=(1, 2, 2))


@pytest.mark.parametrize("steps", [1, 10, 20])
def test_sample_shape_and_range(tiny_denoiser_config, steps):
    model = build_denoiser(tiny_denoiser_config)
    out = sample(model, [1, 1, 1], linear_schedule(T=20), steps=steps,
                 generator=torch.Generator().manual_seed(0))
    assert out.shape == (3, 1, 8, 8)
    assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0


def test_sample_is_reproducible(tiny_denoiser_config):
    model = build_denoiser(tiny_denoiser_config)
    a = sample(model, [0, 1], linear_schedule(T=20), steps=5, generator=torch.Generator().manual_seed(1))
    b = sample(model, [0, 1], linear_schedule(T=20), steps=5, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a, b)


# ========== LOCAL TRAINING ==========

def test_zero_epochs_keeps_initialization(tiny_dataset, tiny_denoiser_config):
    checkpoint = train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                                       TrainConfig(epochs=0, batch_size=8))
    initial = build_denoiser(tiny_denoiser_config).state_dict()
    for name, array in checkpoint.params.items():
        np.testing.assert_array_equal(array, initial[name].numpy())
    assert checkpoint.metadata["epochs"] == 0


def test_default_train_config_records_200_epochs():
    assert TrainConfig().epochs == 200


def test_learning_rate_must_be_on_grid(tiny_dataset, tiny_denoiser_config):
    with pytest.raises(ArgumentError):
        train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                              TrainConfig(epochs=1, lr=0.5))


def test_loss_history_csv(tmp_path, tiny_dataset, tiny_denoiser_config):
    path = tmp_path / "loss.csv"
    checkpoint = train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                                       TrainConfig(epochs=2, batch_size=16), history_path=path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["step", "loss", "epsilon_spent_if_dp"]
    assert len(frame) == checkpoint.metadata["steps"] == 6


def test_dp_training_embeds_ledger_within_budget(tiny_dataset, tiny_denoiser_config):
    checkpoint = train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                                       TrainConfig(epochs=2, batch_size=8, microbatch_size=4),
                                       privacy=PrivacySpec(epsilon_target=10.0))
    ledger = checkpoint.metadata["ledger"]
    assert ledger["spent_epsilon"] <= 10.0
    assert sum(e[2] for e in ledger["events"]) == checkpoint.metadata["steps"] == 10


def test_dp_loss_history_has_epsilon_on_every_row(tmp_path, tiny_dataset, tiny_denoiser_config):
    path = tmp_path / "loss.csv"
    checkpoint = train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                                       TrainConfig(epochs=2, batch_size=8, microbatch_size=4),
                                       privacy=PrivacySpec(epsilon_target=10.0), history_path=path)
    frame = pd.read_csv(path)
    assert len(frame) == 10
    assert frame["epsilon_spent_if_dp"].notna().all()
    assert frame["epsilon_spent_if_dp"].is_monotonic_increasing
    assert frame["epsilon_spent_if_dp"].iloc[-1] == pytest.approx(checkpoint.metadata["ledger"]["spent_epsilon"])


def test_fixed_sigma_over_budget_reports_spendable_steps(tiny_dataset, tiny_denoiser_config):
    with pytest.raises(BudgetExhaustedError) as info:
        train_local_diffusion(tiny_dataset, tiny_denoiser_config, linear_schedule(T=20),
                              TrainConfig(epochs=50, batch_size=40),
                              privacy=PrivacySpec(epsilon_target=1.0, noise_multiplier=0.5))
    assert 0 <= info.value.spendable_steps < 50


@pytest.mark.slow
def test_training_reduces_loss_on_patterns(patterns, tiny_denoiser_config):
    checkpoint = train_local_diffusion(patterns, tiny_denoiser_config, linear_schedule(T=20),
                                       TrainConfig(epochs=200, batch_size=128, lr=3e-3, seed=0))
    losses = np.asarray(checkpoint.metadata["loss_history"])
    window = 20
    start = losses[:window].mean()
    end = losses[-window:].mean()
    assert end < 0.8 * start
