import itertools

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy.stats import chi2_contingency

from diffusion.trainer import prepare_privacy
from errors import ArgumentError, BudgetExhaustedError, CalibrationError, ConfigError
from privacy.accountant import (
    PrivacyLedger,
    PrivacySpec,
    SIGMA_BRACKET,
    calibrate_noise,
    max_steps_within_budget,
    rdp_epsilon,
    split_budget,
)
from privacy.bounded_mean import dp_bounded_mean
from privacy.dpsgd import clip_and_sum, dpsgd_step, poisson_batch


class Dot(nn.Module):
    def __init__(self, dim=2):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return (x * self.w).sum()


def linear_loss(forward, x):
    return forward(x)


def squared_loss(forward, x, y):
    return ((forward(x).squeeze(-1) - y) ** 2).mean()


# ========== SAMPLING AND CLIPPING ==========

def test_poisson_batch_with_q_one_is_full():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(poisson_batch(np.arange(17), 1.0, rng), np.arange(17))


def test_poisson_batch_inclusion_frequency():
    rng = np.random.default_rng(0)
    sizes = [len(poisson_batch(np.arange(1000), 0.3, rng)) for _ in range(200)]
    assert np.mean(sizes) / 1000 == pytest.approx(0.3, abs=0.01)


def inclusion_matrix(trials, size, q, seed=0):
    rng = np.random.default_rng(seed)
    included = np.zeros((trials, size), dtype=bool)
    for trial in range(trials):
        included[trial, poisson_batch(np.arange(size), q, rng)] = True
    return included


def test_poisson_batch_per_index_frequency():
    included = inclusion_matrix(100_000, 10, 0.5)
    np.testing.assert_allclose(included.mean(axis=0), 0.5, atol=0.01)


def test_poisson_batch_pairs_are_independent():
    included = inclusion_matrix(100_000, 10, 0.5, seed=1)
    pairs = list(itertools.combinations(range(10), 2))
    p_values = []
    for i, j in pairs:
        table = np.array([
            [np.sum(included[:, i] & included[:, j]), np.sum(included[:, i] & ~included[:, j])],
            [np.sum(~included[:, i] & included[:, j]), np.sum(~included[:, i] & ~included[:, j])],
        ])
        p_values.append(chi2_contingency(table, correction=False)[1])
    # Bonferroni over all pairs at the 0.01 level
    assert min(p_values) > 0.01 / len(pairs)


def test_clip_rescales_to_unit_norm():
    summed = clip_and_sum({"w": torch.tensor([[3.0, 4.0]])}, clip_norm=1.0)
    assert torch.allclose(summed["w"], torch.tensor([0.6, 0.8]))


def test_clip_leaves_small_gradients():
    summed = clip_and_sum({"w": torch.tensor([[0.1, 0.2]])}, clip_norm=1.0)
    assert torch.allclose(summed["w"], torch.tensor([0.1, 0.2]))


def test_noiseless_step_averages_clipped_gradients():
    model = Dot()
    optimizer = torch.optim.SGD(model.parameters(), lr=1.0)
    spec = PrivacySpec(epsilon_target=1.0, clip_norm=1.0, sample_rate=1.0, noise_multiplier=0.0)
    batch = (torch.tensor([[3.0, 4.0], [0.0, 1.0]]),)
    applied = dpsgd_step(model, optimizer, linear_loss, batch, spec, dataset_size=2)
    assert torch.allclose(applied["w"], torch.tensor([0.3, 0.9]))
    assert torch.allclose(model.w.detach(), torch.tensor([-0.3, -0.9]))


def test_noiseless_unclipped_step_matches_sgd():
    torch.manual_seed(0)
    x = torch.randn(6, 3)
    y = torch.randn(6)

    private = nn.Linear(3, 1)
    plain = nn.Linear(3, 1)
    plain.load_state_dict(private.state_dict())

    spec = PrivacySpec(epsilon_target=1.0, clip_norm=1e6, sample_rate=1.0, noise_multiplier=0.0)
    dpsgd_step(private, torch.optim.SGD(private.parameters(), lr=0.1), squared_loss, (x, y), spec,
               dataset_size=6, microbatch_size=4)

    optimizer = torch.optim.SGD(plain.parameters(), lr=0.1)
    squared_loss(plain, x, y).backward()
    optimizer.step()

    for a, b in zip(private.parameters(), plain.parameters()):
        assert torch.allclose(a, b, atol=1e-6)


def test_empty_batch_records_event_without_update():
    model = Dot()
    ledger = PrivacyLedger()
    spec = PrivacySpec(epsilon_target=1.0, sample_rate=0.1, noise_multiplier=1.0)
    assert dpsgd_step(model, torch.optim.SGD(model.parameters(), lr=1.0), linear_loss, (), spec,
                      dataset_size=10, ledger=ledger) is None
    assert ledger.steps == 1
    assert torch.equal(model.w.detach(), torch.zeros(2))


def test_noise_scale_matches_sigma():
    model = Dot(dim=20000)
    spec = PrivacySpec(epsilon_target=1.0, clip_norm=0.5, sample_rate=1.0, noise_multiplier=2.0)
    batch = (torch.zeros(1, 20000),)
    applied = dpsgd_step(model, torch.optim.SGD(model.parameters(), lr=0.0), linear_loss, batch, spec,
                         dataset_size=4, generator=torch.Generator().manual_seed(0))
    # zero gradient, so the update is pure noise / (q * n)
    assert float(applied["w"].std()) == pytest.approx(2.0 * 0.5 / 4, rel=0.03)


# ========== ACCOUNTING ==========

def test_no_steps_spend_nothing():
    assert rdp_epsilon([], 1e-5) == 0.0
    assert rdp_epsilon([(0.5, 1.0, 0)], 1e-5) == 0.0


def test_full_batch_gaussian_matches_closed_form():
    # q = 1, sigma = 1, one step: min over orders of a/2 + log(1/delta)/(a-1)
    assert rdp_epsilon([(1.0, 1.0, 1)], 1e-5) == pytest.approx(5.29853, rel=0.005)


def test_spent_epsilon_is_monotone():
    spent_by_steps = [rdp_epsilon([(0.05, 1.0, s)], 1e-5) for s in (10, 100, 1000)]
    assert spent_by_steps == sorted(spent_by_steps)
    spent_by_sigma = [rdp_epsilon([(0.05, s, 100)], 1e-5) for s in (0.7, 1.0, 2.0)]
    assert spent_by_sigma == sorted(spent_by_sigma, reverse=True)


def test_composition_of_events_adds_up():
    split = rdp_epsilon([(0.1, 1.0, 50), (0.1, 1.0, 50)], 1e-5)
    assert split == pytest.approx(rdp_epsilon([(0.1, 1.0, 100)], 1e-5))


@pytest.mark.parametrize("target", [1.0, 5.0, 10.0])
def test_calibrated_sigma_lands_within_tolerance(target):
    sigma = calibrate_noise(target, 1e-5, q=0.05, total_steps=200)
    spent = rdp_epsilon([(0.05, sigma, 200)], 1e-5)
    assert 0.99 * target <= spent <= target


def test_calibration_inverts_closed_form():
    assert calibrate_noise(5.29853, 1e-5, q=1.0, total_steps=1) == pytest.approx(1.0, abs=0.02)


def test_unreachable_budget_raises():
    with pytest.raises(CalibrationError):
        calibrate_noise(1e-6, 1e-5, q=1.0, total_steps=100000)


def test_loose_budget_clamps_to_bracket_floor():
    # even sigma = 0.01 spends only a few thousand epsilon for one full-batch step
    sigma = calibrate_noise(1e6, 1e-5, q=1.0, total_steps=1)
    assert sigma == SIGMA_BRACKET[0]
    assert rdp_epsilon([(1.0, sigma, 1)], 1e-5) < 0.99 * 1e6


def test_max_steps_within_budget():
    steps = max_steps_within_budget(2.0, 1e-5, q=0.1, sigma=1.0)
    assert rdp_epsilon([(0.1, 1.0, steps)], 1e-5) <= 2.0
    assert rdp_epsilon([(0.1, 1.0, steps + 1)], 1e-5) > 2.0


def test_fixed_sigma_over_budget():
    with pytest.raises(BudgetExhaustedError) as info:
        prepare_privacy(PrivacySpec(epsilon_target=1.0, noise_multiplier=0.5), 100, 100, 50)
    assert info.value.spendable_steps == max_steps_within_budget(1.0, 1e-5, 1.0, 0.5)


def test_prepare_privacy_sets_sample_rate():
    spec = prepare_privacy(PrivacySpec(epsilon_target=8.0), 1000, 100, 2)
    assert spec.sample_rate == pytest.approx(0.1)
    assert rdp_epsilon([(0.1, spec.noise_multiplier, 20)], 1e-5) <= 8.0


def test_invalid_privacy_spec():
    with pytest.raises(ConfigError):
        PrivacySpec(epsilon_target=0.0)
    with pytest.raises(ConfigError):
        PrivacySpec(epsilon_target=1.0, delta=1.5)


def test_ledger_merges_and_round_trips(tmp_path):
    ledger = PrivacyLedger(delta=1e-5)
    for _ in range(5):
        ledger.record(0.1, 1.2)
    ledger.record(0.2, 1.2, steps=3)
    assert ledger.events == [[0.1, 1.2, 5], [0.2, 1.2, 3]]
    assert ledger.steps == 8

    restored = PrivacyLedger.load(ledger.save(tmp_path / "ledger.json"))
    assert restored.events == ledger.events
    assert restored.spent_epsilon() == pytest.approx(ledger.spent_epsilon())


def test_split_budget():
    assert split_budget(10.0, 0.05) == pytest.approx((9.5, 0.5))
    assert split_budget(4.0, 0.0) == (4.0, 0.0)
    with pytest.raises(ConfigError):
        split_budget(1.0, 1.0)


# ========== BOUNDED MEAN ==========

def test_bounded_mean_with_vanishing_noise():
    values = np.array([0.2, 0.4, 0.9])
    result = dp_bounded_mean(values, 0.0, 1.0, epsilon=1e9, rng=np.random.default_rng(0))
    assert float(result) == pytest.approx(0.5, abs=1e-6)


def test_bounded_mean_clamps_inputs():
    values = np.array([-5.0, 0.5, 10.0])
    result = dp_bounded_mean(values, 0.0, 1.0, epsilon=1e9, rng=np.random.default_rng(0))
    assert float(result) == pytest.approx(0.5, abs=1e-6)


def test_bounded_mean_per_position_queries():
    values = np.stack([np.full((2, 3), 1.0), np.full((2, 3), 3.0)])
    result = dp_bounded_mean(values, 0.0, 4.0, epsilon=1e9, rng=np.random.default_rng(0))
    assert result.shape == (2, 3)
    np.testing.assert_allclose(result, 2.0, atol=1e-6)


def test_bounded_mean_noise_scale():
    # 200 rows of 0.5 in [0, 1] with eps = 1: sum and count each get Laplace(2),
    # so the released mean has std close to sqrt(2 * 4 + 0.25 * 2 * 4) / 200
    values = np.full((200, 5000), 0.5)
    result = dp_bounded_mean(values, 0.0, 1.0, epsilon=1.0, rng=np.random.default_rng(0))
    assert float(np.mean(result)) == pytest.approx(0.5, abs=0.002)
    assert float(np.std(result)) == pytest.approx(np.sqrt(10.0) / 200, rel=0.06)


def test_bounded_mean_numerator_noise_scale():
    # all-zero rows: the output is Laplace((U - L) / (eps / 2)) on the sum over a
    # count near 200, and the mean absolute value of Laplace(b) is b
    count, lower, upper, epsilon = 200, 0.0, 4.0, 1.0
    values = np.zeros((count, 10_000))
    result = dp_bounded_mean(values, lower, upper, epsilon=epsilon, rng=np.random.default_rng(3))
    scale = (upper - lower) / (epsilon / 2.0)
    assert float(np.mean(np.abs(result * count))) == pytest.approx(scale, rel=0.05)


def test_bounded_mean_ignores_row_order():
    rng = np.random.default_rng(4)
    values = rng.random((50, 4))
    shuffled = values[rng.permutation(50)]
    first = dp_bounded_mean(values, 0.0, 1.0, epsilon=2.0, rng=np.random.default_rng(9))
    second = dp_bounded_mean(shuffled, 0.0, 1.0, epsilon=2.0, rng=np.random.default_rng(9))
    np.testing.assert_allclose(second, first, rtol=1e-12, atol=1e-12)


def test_bounded_mean_rejects_bad_arguments():
    with pytest.raises(ArgumentError):
        dp_bounded_mean([1.0], 1.0, 0.0, epsilon=1.0)
    with pytest.raises(ArgumentError):
        dp_bounded_mean([1.0], 0.0, 1.0, epsilon=0.0)
