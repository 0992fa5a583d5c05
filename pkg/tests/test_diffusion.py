import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from osdiff.diffusion import (
    NoiseSchedule,
    ScheduleError,
    forward_diffuse,
    make_schedule,
    noise_prediction_loss,
    one_step_sample,
    reverse_step,
    strided_step,
    sub_schedule,
)
from osdiff.nn import Rng, ShapeError

S = make_schedule()


def quarter_schedule():
    # one step with beta = 0.75 gives alpha_bar[1] = 0.25
    return make_schedule(1, 0.75, 0.75)


class TestSchedule:
    def test_single_step_product(self):
        assert make_schedule(1, 0.1, 0.1).alpha_bar[1] == pytest.approx(0.9)

    def test_default_reaches_near_pure_noise(self):
        # independent product in log space
        betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
        ref = math.exp(sum(math.log1p(-b) for b in betas))
        assert S.alpha_bar[1000] == pytest.approx(ref, rel=1e-9)
        assert S.alpha_bar[1000] < 1e-4

    def test_stored_relations_exact(self):
        assert S.alpha_bar[0] == 1.0
        np.testing.assert_array_equal(S.alphas, 1 - S.betas)
        np.testing.assert_array_equal(S.alpha_bar, np.cumprod(S.alphas))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.floats(1e-5, 0.5), st.floats(0, 0.49))
    def test_invariants_any_schedule(self, T, b0, extra):
        s = make_schedule(T, b0, b0 + extra)
        assert np.all((s.betas[1:] > 0) & (s.betas[1:] < 1))
        assert s.alpha_bar[0] == 1.0
        assert np.all(np.diff(s.alpha_bar) < 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_bad_arguments(self, args):
        with pytest.raises(ScheduleError):
            make_schedule(*args)

    def test_inference_timestep_above_floor(self):
        assert S.alpha_bar[999] > 1e-8
        assert 1 / math.sqrt(S.alpha_bar[999]) == pytest.approx(157, rel=0.02)


class TestForward:
    def test_zero_noise(self):
        y0 = torch.randn(2, 4, 3, 3)
        out = forward_diffuse(y0, 500, torch.zeros_like(y0), S)
        assert torch.allclose(out, math.sqrt(S.alpha_bar[500]) * y0)

    def test_quarter_example(self):
        out = forward_diffuse(torch.ones(1), 1, torch.ones(1), quarter_schedule())
        assert out.item() == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-6)
        assert out.item() == pytest.approx(1.3660, abs=1e-4)

    def test_monte_carlo_moments(self):
        t, y0 = 300, 1.7
        ab = S.alpha_bar[t]
        eps = Rng(0).normal((10_000,), torch.float64)
        y = forward_diffuse(torch.full((10_000,), y0, dtype=torch.float64), t, eps, S).numpy()
        sigma = math.sqrt(1 - ab)
        assert abs(y.mean() - math.sqrt(ab) * y0) < 4 * sigma / math.sqrt(10_000)
        assert abs(y.var() / (1 - ab) - 1) < 0.05

    def test_per_sample_timesteps(self):
        y0 = torch.randn(3, 2, 2, 2, dtype=torch.float64)
        eps = torch.randn_like(y0)
        ts = np.array([1, 500, 1000])
        out = forward_diffuse(y0, ts, eps, S)
        for i, t in enumerate(ts):
            assert torch.allclose(out[i], forward_diffuse(y0[i:i + 1], int(t), eps[i:i + 1], S)[0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_diffuse(torch.zeros(2, 2), 5, torch.zeros(2, 3), S)

    @pytest.mark.parametrize("t", [0, 1001])
    def test_bad_t(self, t):
        with pytest.raises(ScheduleError):
            forward_diffuse(torch.zeros(1), t, torch.zeros(1), S)


class TestReverse:
    def test_t1_recovers_y0_with_true_noise(self):
        y0 = torch.randn(1, 4, 5, 5, dtype=torch.float64)
        eps = torch.randn_like(y0)
        y1 = forward_diffuse(y0, 1, eps, S)
        assert torch.allclose(reverse_step(y1, eps, 1, S, None), y0, atol=1e-12)

    def test_t1_deterministic(self):
        y = torch.randn(1, 3)
        a = reverse_step(y, torch.zeros_like(y), 1, S, Rng(0))
        b = reverse_step(y, torch.zeros_like(y), 1, S, Rng(1))
        assert torch.equal(a, b)

    def test_zero_eps_hat_formula(self):
        t = 40
        y = torch.randn(1, 6, dtype=torch.float64)
        var = (1 - S.alpha_bar[t - 1]) / (1 - S.alpha_bar[t]) * S.betas[t]
        out = reverse_step(y, torch.zeros_like(y), t, S, Rng(5))
        noise = Rng(5).normal(y.shape, torch.float64)
        assert torch.allclose(out, y / math.sqrt(S.alphas[t]) + math.sqrt(var) * noise)

    def test_t0_rejected(self):
        with pytest.raises(ScheduleError):
            reverse_step(torch.zeros(1), torch.zeros(1), 0, S, Rng(0))

    def test_full_chain_with_oracle_noise(self):
        # 1-pixel latent; at every step eps_hat is the exact noise implied by y_t and y0
        y0 = torch.tensor([0.8], dtype=torch.float64)
        rng = Rng(9)
        y = forward_diffuse(y0, S.T, rng.normal((1,), torch.float64), S)
        for t in range(S.T, 0, -1):
            ab = S.alpha_bar[t]
            eps_hat = (y - math.sqrt(ab) * y0) / math.sqrt(1 - ab)
            y = reverse_step(y, eps_hat, t, S, rng)
        assert abs(y.item() - 0.8) < 1e-4

    def test_strided_single_jump_equals_reverse_step(self):
        y = torch.randn(1, 4, dtype=torch.float64)
        e = torch.randn_like(y)
        assert torch.allclose(strided_step(y, e, 10, 9, S, Rng(2)), reverse_step(y, e, 10, S, Rng(2)))

    def test_strided_to_zero_is_one_step_sample(self):
        y = torch.randn(1, 4, dtype=torch.float64)
        e = torch.randn_like(y)
        assert torch.allclose(strided_step(y, e, 700, 0, S, None), one_step_sample(y, e, 700, S))


class TestLoss:
    def test_equal_is_zero(self):
        e = torch.randn(2, 4, 4, 4)
        assert noise_prediction_loss(e, e).item() == 0.0

    def test_ones_is_one(self):
        assert noise_prediction_loss(torch.zeros(3, 3), torch.ones(3, 3)).item() == 1.0

    def test_random_pair(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 8, 8))
        ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert noise_prediction_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(ref, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            noise_prediction_loss(torch.zeros(2), torch.zeros(3))


class TestOneStep:
    def test_quarter_example(self):
        out = one_step_sample(torch.tensor([1.3660254]), torch.ones(1), 1, quarter_schedule())
        assert out.item() == pytest.approx(1.0, abs=1e-6)

    def test_degenerate_alpha_bar_one(self):
        ones = np.ones(2)
        s = NoiseSchedule(1, 0.0, 0.0, np.zeros(2), ones, ones)
        y = torch.randn(5)
        assert torch.equal(one_step_sample(y, torch.randn(5), 1, s), y)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 999), st.integers(0, 2**32 - 1))
    def test_inverts_forward(self, t, seed):
        rng = Rng(seed)
        y0, eps = rng.normal((1, 4, 4, 4)), rng.normal((1, 4, 4, 4))
        back = one_step_sample(forward_diffuse(y0, t, eps, S), eps, t, S)
        assert (back - y0).abs().max().item() < 1e-4

    def test_below_floor_rejected(self):
        s = make_schedule(5000, 1e-4, 0.02)
        t = int(np.argmax(s.alpha_bar < 1e-8))
        with pytest.raises(ScheduleError):
            one_step_sample(torch.zeros(1), torch.zeros(1), t, s)


class TestSubSchedule:
    def test_endpoints_and_length(self):
        ts = sub_schedule(999, 50)
        assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_single(self):
        assert sub_schedule(999, 1) == [999]

    def test_too_many(self):
        with pytest.raises(ScheduleError):
            sub_schedule(10, 11)
