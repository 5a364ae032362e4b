import math

import numpy as np
import pytest
import torch

from diffusion_schedule import (NoiseSchedule, ddpm_sample, fast_sample, fast_timesteps, forward_step,
                                make_schedule, predict_x0, q_sample, reverse_step)
from errors import ConfigurationError, ContractViolation, ParameterError, ShapeError, TimestepError


class OracleDenoiser:
    """Knows the single training point, so eps is exact at every step"""

    def __init__(self, x0, schedule):
        self.x0 = x0
        self.schedule = schedule

    def check_conditioning(self, cond):
        pass

    def predict_eps(self, x_t, t, cond=None, guidance_scale=None):
        abar = self.schedule.alpha_bar(t)
        return (x_t - math.sqrt(abar) * self.x0) / math.sqrt(1.0 - abar)


def test_hand_case():
    s = make_schedule(2, 0.5, 0.5)
    assert s.alpha_bars.tolist() == [0.5, 0.25]
    assert s.alpha(1) == 0.5
    assert s.alpha_bar(2) == 0.25


def test_random_schedules_are_monotone_and_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(1, 1200))
        beta_start = float(rng.uniform(1e-4, 1e-2))
        beta_end = float(rng.uniform(beta_start, 0.05))
        s = make_schedule(T, beta_start, beta_end)
        abar = s.alpha_bars.tolist()
        alphas = s.alphas.tolist()
        assert abar[0] == alphas[0]
        for i in range(1, T):
            assert abar[i] < abar[i - 1]
            assert abar[i] == abar[i - 1] * alphas[i]
        assert all(0 < b < 1 for b in s.betas.tolist())


@pytest.mark.parametrize('kwargs', [
    dict(T=0), dict(T=10, beta_start=0.0), dict(T=10, beta_end=1.0),
    dict(T=10, beta_start=0.03, beta_end=0.02), dict(T=10, kind='cosine'),
])
def test_invalid_schedules_rejected(kwargs):
    with pytest.raises(ParameterError):
        make_schedule(**kwargs)


def test_underflow_rejected():
    with pytest.raises(ParameterError):
        make_schedule(100000, 0.5, 0.9)


def test_timestep_bounds(tiny_schedule):
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(TimestepError):
        tiny_schedule.alpha_bar(0)
    with pytest.raises(TimestepError):
        tiny_schedule.alpha_bar(tiny_schedule.T + 1)
    with pytest.raises(TimestepError):
        q_sample(x, torch.tensor([0, 3]), torch.zeros_like(x), tiny_schedule)
    with pytest.raises(IndexError):
        q_sample(x, tiny_schedule.T + 1, torch.zeros_like(x), tiny_schedule)


def test_shape_mismatch(tiny_schedule):
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(1, 1, 4, 4), 3, torch.zeros(1, 1, 4, 5), tiny_schedule)
    with pytest.raises(ShapeError):
        forward_step(torch.zeros(1, 1, 4, 4), 3, torch.zeros(2, 1, 4, 4), tiny_schedule)


def test_q_sample_at_first_step_matches_forward_step(tiny_schedule):
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    assert torch.allclose(q_sample(x0, 1, eps, tiny_schedule), forward_step(x0, 1, eps, tiny_schedule))


def test_q_sample_per_sample_timesteps(tiny_schedule):
    x0 = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    out = q_sample(x0, torch.tensor([1, 50]), eps, tiny_schedule)
    assert torch.allclose(out[0], torch.full_like(out[0], math.sqrt(tiny_schedule.alpha_bar(1))))
    assert torch.allclose(out[1], torch.full_like(out[1], math.sqrt(tiny_schedule.alpha_bar(50))))


def test_reverse_step_with_oracle_noise_recovers_x0(tiny_schedule):
    g = torch.Generator().manual_seed(2)
    x0 = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
    x1 = q_sample(x0, 1, eps, tiny_schedule)
    assert torch.allclose(reverse_step(x1, 1, eps, tiny_schedule), x0, atol=1e-5)
    assert torch.allclose(reverse_step(x1, 1, eps, tiny_schedule, torch.zeros_like(x0)), x0, atol=1e-5)
    assert torch.allclose(predict_x0(x1, 1, eps, tiny_schedule), x0, atol=1e-8)


def test_reverse_step_refuses_noise_at_last_step(tiny_schedule):
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ContractViolation):
        reverse_step(x, 1, x, tiny_schedule, torch.ones_like(x))


def test_ddpm_sample_converges_with_oracle(tiny_schedule):
    x0 = torch.linspace(-0.8, 0.8, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
    oracle = OracleDenoiser(x0, tiny_schedule)
    out = ddpm_sample(oracle, (1, 1, 4, 4), tiny_schedule, seed=3, dtype=torch.float64)
    assert float(torch.linalg.vector_norm(out - x0)) < 1e-2


def test_ddpm_sample_is_seed_deterministic(tiny_schedule):
    x0 = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    oracle = OracleDenoiser(x0 + 0.3, tiny_schedule)
    a = ddpm_sample(oracle, (2, 1, 4, 4), tiny_schedule, seed=5, dtype=torch.float64)
    b = ddpm_sample(oracle, (2, 1, 4, 4), tiny_schedule, seed=5, dtype=torch.float64)
    assert torch.equal(a, b)


@pytest.mark.parametrize('order', [1, 2])
def test_fast_sample_converges_with_oracle(tiny_schedule, order):
    x0 = torch.linspace(-0.5, 0.5, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
    oracle = OracleDenoiser(x0, tiny_schedule)
    out = fast_sample(oracle, (1, 1, 4, 4), 10, tiny_schedule, seed=0, order=order, dtype=torch.float64)
    assert torch.allclose(out, x0, atol=1e-6)


def test_fast_timesteps():
    assert fast_timesteps(10, 10) == list(range(10, 0, -1))
    steps = fast_timesteps(1000, 50)
    assert len(steps) == 50
    assert steps[0] == 1000 and steps[-1] == 1
    assert all(a > b for a, b in zip(steps, steps[1:]))
    with pytest.raises(ParameterError):
        fast_timesteps(10, 11)
    with pytest.raises(ParameterError):
        fast_timesteps(10, 0)


def test_fast_sample_rejects_bad_order(tiny_schedule):
    oracle = OracleDenoiser(torch.zeros(1, 1, 2, 2), tiny_schedule)
    with pytest.raises(ParameterError):
        fast_sample(oracle, (1, 1, 2, 2), 5, tiny_schedule, seed=0, order=3)


def test_sampler_needs_conditioning_check(tiny_schedule):
    class Bare:
        def predict_eps(self, x_t, t, cond=None, guidance_scale=None):
            return x_t

    with pytest.raises(ConfigurationError):
        ddpm_sample(Bare(), (1, 1, 2, 2), tiny_schedule, seed=0)


def test_metadata_rederives_tables():
    s = make_schedule(30, 2e-4, 0.03)
    restored = NoiseSchedule.from_metadata(s.to_metadata())
    assert restored == s
    assert torch.equal(restored.alpha_bars, s.alpha_bars)


class ScaledDenoiser:
    """eps = 0.5 * x_t: not an oracle, but deterministic and input-dependent"""

    def check_conditioning(self, cond):
        pass

    def predict_eps(self, x_t, t, cond=None, guidance_scale=None):
        return 0.5 * x_t


def test_iterated_forward_steps_match_q_sample_marginal(tiny_schedule):
    n, t, x0 = 20000, 12, 0.7
    g = torch.Generator().manual_seed(11)
    x = torch.full((n,), x0, dtype=torch.float64)
    for step in range(1, t + 1):
        x = forward_step(x, step, torch.randn(n, generator=g, dtype=torch.float64), tiny_schedule)
    abar = tiny_schedule.alpha_bar(t)
    mean, var = math.sqrt(abar) * x0, 1.0 - abar
    assert abs(float(x.mean()) - mean) <= 3 * math.sqrt(var / n)
    assert abs(float(x.var()) - var) <= 3 * var * math.sqrt(2.0 / (n - 1))


def test_q_sample_variance(tiny_schedule):
    n, t = 20000, 30
    eps = torch.randn(n, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
    out = q_sample(torch.full((n,), -0.4, dtype=torch.float64), t, eps, tiny_schedule)
    var = 1.0 - tiny_schedule.alpha_bar(t)
    assert abs(float(out.var()) - var) <= 3 * var * math.sqrt(2.0 / (n - 1))


def test_ddpm_sample_depends_on_seed(tiny_schedule):
    a = ddpm_sample(ScaledDenoiser(), (2, 1, 4, 4), tiny_schedule, seed=5, dtype=torch.float64)
    b = ddpm_sample(ScaledDenoiser(), (2, 1, 4, 4), tiny_schedule, seed=6, dtype=torch.float64)
    assert float(torch.linalg.vector_norm(a - b)) > 0


def test_fast_sample_with_every_timestep_is_the_stepwise_reverse_pass(tiny_schedule):
    model, shape, T = ScaledDenoiser(), (2, 1, 4, 4), tiny_schedule.T
    out = fast_sample(model, shape, T, tiny_schedule, seed=7, order=1, dtype=torch.float64)

    x = torch.randn(shape, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    for t in range(T, 1, -1):
        eps = model.predict_eps(x, t)
        x0 = predict_x0(x, t, eps, tiny_schedule)
        abar_prev = tiny_schedule.alpha_bar(t - 1)
        x = math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps
    expected = predict_x0(x, 1, model.predict_eps(x, 1), tiny_schedule)
    assert torch.allclose(out, expected, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize('order', [1, 2])
def test_fast_sample_endpoint_agrees_with_ddpm_sample(order):
    s = make_schedule(200, 1e-4, 0.02)
    x0 = torch.linspace(-0.6, 0.6, 32, dtype=torch.float64).reshape(2, 1, 4, 4)
    oracle = OracleDenoiser(x0, s)
    full = ddpm_sample(oracle, (2, 1, 4, 4), s, seed=13, dtype=torch.float64)
    fast = fast_sample(oracle, (2, 1, 4, 4), 50, s, seed=13, order=order, dtype=torch.float64)
    assert float(torch.linalg.vector_norm(fast - full)) < 5e-2


def test_fast_timesteps_strictly_decrease_for_every_stride():
    for T in range(1, 121):
        for steps in range(1, T + 1):
            timesteps = fast_timesteps(T, steps)
            assert len(timesteps) == steps and timesteps[0] == T
            assert all(a > b for a, b in zip(timesteps, timesteps[1:]))
            assert steps == 1 or timesteps[-1] == 1
