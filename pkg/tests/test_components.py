import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from osdiff.adversarial import (
    SCORE_EPS,
    LatentDiscriminator,
    PixelDiscriminator,
    discriminate,
    discriminator_loss,
    generator_gan_loss,
    sample_noisy_pair,
)
from osdiff.autoencoder import AutoEncoder, decode, encode, images_to_tensor, tensor_to_images
from osdiff.corpus import synthetic_corpus
from osdiff.denoiser import (
    Denoiser,
    DenoiserConfig,
    decode_multi_step,
    decode_one_step,
    predict_noise,
)
from osdiff.diffusion import ScheduleError, make_schedule, one_step_sample
from osdiff.entropy_coder import TOTAL, cross_entropy_bits, range_decode, range_encode
from osdiff.latent_codec import (
    Analysis,
    EntropyModel,
    SupportError,
    Synthesis,
    estimate_rate,
    fit_cdf_tables,
    quantize,
    quantize_pmf,
)
from osdiff.nn import Rng, ShapeError, check_gradients

S = make_schedule()
TINY = DenoiserConfig(width=8, blocks=1, emb_dim=16)


def r(*shape, seed=0, dtype=torch.float32):
    return Rng(seed).normal(shape, dtype)


class TestAutoEncoder:
    def test_shapes_and_clamp(self):
        torch.manual_seed(0)
        vae = AutoEncoder(8)
        x = images_to_tensor(synthetic_corpus(2, seed=3))
        y = encode(x, vae)
        assert y.shape == (2, 4, 16, 16)
        img = decode(y * 50, vae)
        assert img.shape == (2, 3, 64, 64)
        assert img.min() >= 0 and img.max() <= 1
        assert tensor_to_images(img).shape == (2, 64, 64, 3)

    def test_deterministic(self):
        torch.manual_seed(0)
        vae = AutoEncoder(8)
        x = images_to_tensor(synthetic_corpus(1, seed=4))
        assert torch.equal(encode(x, vae), encode(x.clone(), vae))

    def test_dims_must_divide_32(self):
        torch.manual_seed(0)
        with pytest.raises(ShapeError):
            encode(torch.zeros(1, 3, 48, 64), AutoEncoder(8))

    def test_decode_wrong_channels(self):
        torch.manual_seed(0)
        with pytest.raises(ShapeError):
            decode(torch.zeros(1, 3, 16, 16), AutoEncoder(8))


class TestTransforms:
    def test_shapes(self):
        torch.manual_seed(0)
        ga, gs = Analysis(8, 16), Synthesis(8, 16)
        v = ga(r(2, 4, 16, 16))
        assert v.shape == (2, 8, 8, 8)
        assert gs(v).shape == (2, 4, 16, 16)

    def test_analysis_rejects_odd_and_wrong_channels(self):
        torch.manual_seed(0)
        ga = Analysis(8, 16)
        with pytest.raises(ShapeError):
            ga(r(1, 4, 15, 16))
        with pytest.raises(ShapeError):
            ga(r(1, 3, 16, 16))

    def test_synthesis_zero_code_is_fixed_pattern(self):
        torch.manual_seed(0)
        gs = Synthesis(8, 16)
        a = gs(torch.zeros(1, 8, 4, 4))
        assert torch.equal(a, gs(torch.zeros(1, 8, 4, 4)))
        with pytest.raises(ShapeError):
            gs(torch.zeros(1, 7, 4, 4))

    @pytest.mark.parametrize("which", ["analysis", "synthesis"])
    def test_gradients(self, which):
        torch.manual_seed(0)
        net = (Analysis(8, 8) if which == "analysis" else Synthesis(8, 8)).double()
        x = r(1, 4 if which == "analysis" else 8, 4, 4, dtype=torch.float64).requires_grad_(True)
        params = {"x": x, **dict(net.named_parameters())}
        errs = check_gradients(lambda: net(x).pow(2).sum(), params, max_entries=12, floor=1e-6)
        assert max(errs.values()) < 1e-3


class TestQuantize:
    def test_examples(self):
        v = torch.tensor([0.4, 0.6, 2.5, -2.5, 3.5, 40.0, -40.0])
        assert quantize(v).tolist() == [0, 1, 2, -2, 4, 31, -31]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=50))
    def test_hard_idempotent_and_integer(self, vals):
        v = torch.tensor(vals, dtype=torch.float64)
        q = quantize(v)
        assert torch.equal(quantize(q), q)
        assert torch.equal(q, torch.round(q)) and q.abs().max() <= 31

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32))
    def test_noise_within_half(self, seed):
        v = r(100, seed=seed) * 5
        assert (quantize(v, "noise", rng=Rng(seed + 1)) - v).abs().max() <= 0.5

    def test_ste_forward_hard_backward_identity(self):
        v = torch.tensor([0.3, 1.7, -2.2], requires_grad=True)
        q = quantize(v, "ste")
        assert q.tolist() == [0, 2, -2]
        (q * torch.tensor([1.0, 2.0, 3.0])).sum().backward()
        assert v.grad.tolist() == [1.0, 2.0, 3.0]


def flat_model(channels=2, bound=3):
    # a very wide single logistic is close to uniform on the support
    m = EntropyModel(channels, bound, components=1)
    with torch.no_grad():
        m.means.zero_()
        m.log_scales.fill_(12.0)
    return m


class TestEntropyModel:
    def test_cdf_endpoints_and_monotone(self):
        torch.manual_seed(0)
        m = EntropyModel(3, 31)
        with torch.no_grad():
            m.means.normal_()
            m.log_scales.normal_()
        x = torch.linspace(-31.5, 31.5, 400).expand(3, -1).double()
        c = m.cdf(x).detach()
        assert torch.all(c[:, 1:] >= c[:, :-1] - 1e-12)
        np.testing.assert_allclose(c[:, 0].numpy(), 0, atol=1e-12)
        np.testing.assert_allclose(c[:, -1].numpy(), 1, atol=1e-12)

    def test_pmf_sums_to_one(self):
        torch.manual_seed(0)
        m = EntropyModel(4, 31)
        np.testing.assert_allclose(m.pmf().sum(-1).detach().numpy(), 1.0, atol=1e-12)

    def test_mixture_mass_against_scipy(self):
        m = EntropyModel(1, 5, components=2)
        with torch.no_grad():
            m.logits.copy_(torch.tensor([[0.3, -0.4]]))
            m.means.copy_(torch.tensor([[-1.0, 2.0]]))
            m.log_scales.copy_(torch.tensor([[0.2, -0.5]]))
        w = np.exp([0.3, -0.4]) / np.exp([0.3, -0.4]).sum()
        cdf = lambda x: sum(wi * stats.logistic.cdf(x, mu, math.exp(ls))
                            for wi, mu, ls in zip(w, (-1.0, 2.0), (0.2, -0.5)))
        z = cdf(5.5) - cdf(-5.5)
        ref = [(cdf(k + 0.5) - cdf(k - 0.5)) / z for k in range(-5, 6)]
        np.testing.assert_allclose(m.pmf()[0].detach().numpy(), ref, rtol=2e-6)

    def test_uniform_256_symbols_gives_8000_bits(self):
        # the learned alphabet is odd (2L+1), so the 256-symbol case runs on a frozen table
        cdf = [i * TOTAL // 256 for i in range(257)]
        sym = np.random.default_rng(0).integers(0, 256, 1000)
        assert cross_entropy_bits(sym, cdf) == 8000.0

    def test_near_uniform_model_rate(self):
        m = flat_model(1, 3)
        v = torch.zeros(1, 1, 10, 100, dtype=torch.float64)
        bits = estimate_rate(v, m).item()
        assert bits == pytest.approx(1000 * math.log2(7), rel=1e-6)

    def test_certain_model_near_zero_bits(self):
        m = EntropyModel(1, 31, components=1)
        with torch.no_grad():
            m.log_scales.fill_(-8.0)
            m.means.zero_()
        assert estimate_rate(torch.zeros(1, 1, 8, 8), m).item() < 1e-3

    def test_outside_support(self):
        with pytest.raises(SupportError):
            estimate_rate(torch.full((1, 2, 1, 1), 3.6), flat_model(2, 3))

    def test_per_channel(self):
        m = flat_model(2, 3)
        v = torch.zeros(1, 2, 4, 4)
        per = estimate_rate(v, m, per_channel=True)
        assert per.shape == (2,)
        assert per.sum().item() == pytest.approx(estimate_rate(v, m).item())

    def test_gradient_wrt_noisy_values_and_params(self):
        torch.manual_seed(0)
        m = EntropyModel(2, 6).double()
        v = (r(1, 2, 3, 3, dtype=torch.float64) * 2).requires_grad_(True)
        params = {"v": v, **dict(m.named_parameters())}
        assert max(check_gradients(lambda: estimate_rate(v, m), params).values()) < 1e-3


class TestTables:
    def test_uniform_four(self):
        assert (np.cumsum(quantize_pmf(np.full(4, 0.25)))).tolist() == [16384, 32768, 49152, 65536]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=70).filter(lambda p: sum(p) > 0))
    def test_quantized_table_contract(self, p):
        f = quantize_pmf(np.array(p))
        assert f.sum() == TOTAL and f.min() >= 1

    def test_bad_pmf(self):
        from osdiff.entropy_coder import CoderError
        with pytest.raises(CoderError):
            quantize_pmf(np.array([0.5, -0.1, 0.6]))

    def test_fit_tables_and_roundtrip(self):
        torch.manual_seed(0)
        m = EntropyModel(2, 31)
        with torch.no_grad():
            m.log_scales.fill_(1.0)
        tables = fit_cdf_tables(m)
        assert tables.shape == (2, 64)
        assert np.all(np.diff(tables, axis=1) >= 1) and np.all(tables[:, -1] == TOTAL)
        rng = np.random.default_rng(0)
        pmf = np.diff(tables[0]) / TOTAL
        sym = rng.choice(63, 100_000, p=pmf).tolist()
        payload = range_encode(sym, tables[0])
        assert range_decode(payload, len(sym), tables[0]) == sym

    def test_estimate_agrees_with_coder(self):
        torch.manual_seed(0)
        m = EntropyModel(1, 31)
        with torch.no_grad():
            m.log_scales.fill_(0.7)
        tables = fit_cdf_tables(m)
        pmf = m.pmf()[0].detach().numpy()
        sym = np.random.default_rng(1).choice(63, 4096, p=pmf / pmf.sum())
        est = estimate_rate(torch.from_numpy(sym - 31.0).reshape(1, 1, 64, 64), m).item()
        coded = 8 * len(range_encode(sym.tolist(), tables[0]))
        assert abs(est - coded) <= 0.01 * coded + 32


class TestDenoiser:
    def test_shape(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.attach_control()
        assert predict_noise(r(2, 4, 16, 16), r(2, 4, 16, 16, seed=1), 500, den).shape == (2, 4, 16, 16)

    def test_zero_init_control_is_neutral(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        y_t = r(1, 4, 16, 16)
        plain = den(y_t, None, 700)
        den.attach_control()
        assert torch.equal(den(y_t, r(1, 4, 16, 16, seed=5), 700), plain)

    def test_shape_mismatch(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.attach_control()
        with pytest.raises(ShapeError):
            den(r(1, 4, 16, 16), r(1, 4, 8, 8), 5)

    def test_gradient_through_control(self):
        torch.manual_seed(0)
        den = Denoiser(DenoiserConfig(width=8, blocks=1, emb_dim=8))
        den.attach_control()
        den = den.double()
        # perturb the zero projections so the control path carries signal
        with torch.no_grad():
            for p in den.control.parameters():
                p.add_(0.05 * torch.randn_like(p))
        y_t, y_c = r(1, 4, 4, 4, dtype=torch.float64), r(1, 4, 4, 4, seed=1, dtype=torch.float64)
        params = dict(den.control.named_parameters())
        errs = check_gradients(lambda: den(y_t, y_c, 300).pow(2).sum(), params, max_entries=6, floor=1e-6)
        assert max(errs.values()) < 1e-3

    def test_one_step_single_evaluation_and_deterministic(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.attach_control()
        y_c = r(1, 4, 16, 16)
        den.evaluations = 0
        a = decode_one_step(y_c, 999, 7, den, S)
        assert den.evaluations == 1
        assert torch.equal(a, decode_one_step(y_c, 999, 7, den, S))
        assert not torch.equal(a, decode_one_step(y_c, 999, 8, den, S))

    @pytest.mark.parametrize("n", [1, 5, 50])
    def test_multi_step_counts(self, n):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.evaluations = 0
        decode_multi_step(r(1, 4, 16, 16), n, 0, den, S)
        assert den.evaluations == n

    def test_multi_step_one_equals_one_step(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        y_c = r(1, 4, 16, 16)
        assert torch.allclose(decode_multi_step(y_c, 1, 3, den, S, 999), decode_one_step(y_c, 999, 3, den, S))

    def test_too_many_steps(self):
        torch.manual_seed(0)
        with pytest.raises(ScheduleError):
            decode_multi_step(r(1, 4, 16, 16), 1001, 0, Denoiser(TINY), S)

    def test_floor_violation(self):
        torch.manual_seed(0)
        s = make_schedule(3000, 1e-4, 0.02)
        with pytest.raises(ScheduleError):
            decode_one_step(r(1, 4, 16, 16), 3000, 0, Denoiser(TINY), s)

    def test_unknown_parameterization(self):
        with pytest.raises(ValueError):
            Denoiser(DenoiserConfig(width=8, blocks=1, emb_dim=16, param="x0"))

    @pytest.mark.parametrize("t", [1, 250, 999])
    def test_velocity_output_converts_to_noise(self, t):
        torch.manual_seed(0)
        den = Denoiser(TINY).double()
        y_t = r(1, 4, 8, 8, dtype=torch.float64)
        v = den.unet(y_t, t)
        ab = S.alpha_bar[t]
        assert torch.allclose(den(y_t, None, t), math.sqrt(1 - ab) * y_t + math.sqrt(ab) * v, atol=1e-12)

    @pytest.mark.parametrize("t", [10, 999])
    def test_one_step_estimate_from_velocity(self, t):
        # the clean estimate is sqrt(ab) y_t - sqrt(1 - ab) v, with no 1/sqrt(ab) factor
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.attach_control()
        den = den.double()
        y_c = r(1, 4, 8, 8, dtype=torch.float64)
        y_r = decode_one_step(y_c, t, 4, den, S)
        ab = S.alpha_bar[t]
        y_t = math.sqrt(ab) * y_c + math.sqrt(1 - ab) * Rng(4).normal(y_c.shape, torch.float64)
        ref = math.sqrt(ab) * y_t - math.sqrt(1 - ab) * den.unet(y_t, t, *den.control(y_t, y_c, t))
        assert torch.allclose(y_r, ref, atol=1e-9)

    def test_velocity_target_is_recovered_exactly(self):
        # if the network outputs the true velocity, the noise and the clean latent come back exactly
        t = 600
        ab = S.alpha_bar[t]
        y0, eps = r(1, 4, 8, 8, dtype=torch.float64), r(1, 4, 8, 8, seed=1, dtype=torch.float64)
        y_t = math.sqrt(ab) * y0 + math.sqrt(1 - ab) * eps
        den = Denoiser(TINY).double()
        v = math.sqrt(ab) * eps - math.sqrt(1 - ab) * y0
        eps_hat = den._to_eps(v, y_t, t)
        assert torch.allclose(eps_hat, eps, atol=1e-12)
        assert torch.allclose(one_step_sample(y_t, eps_hat, t, S), y0, atol=1e-9)

    def test_eps_parameterization_passes_through(self):
        torch.manual_seed(0)
        den = Denoiser(DenoiserConfig(width=8, blocks=1, emb_dim=16, param="eps"))
        y_t = r(1, 4, 8, 8)
        assert torch.equal(den(y_t, None, 500), den.unet(y_t, 500))


class TestAdversarial:
    def _disc(self):
        torch.manual_seed(0)
        return LatentDiscriminator(Denoiser(TINY).unet, hidden=16)

    def test_untrained_score_is_half(self):
        d = self._disc()
        s = discriminate(r(3, 4, 16, 16), np.array([1, 200, 500]), d)
        assert torch.all(s == 0.5)
        assert torch.all(PixelDiscriminator(8, 16)(torch.rand(2, 3, 64, 64)) == 0.5)

    def test_scores_clamped(self):
        d = self._disc()
        with torch.no_grad():
            d.head.fc2.bias.fill_(1e4)
        assert torch.all(d(r(2, 4, 16, 16), 10) == 1 - SCORE_EPS)
        with torch.no_grad():
            d.head.fc2.bias.fill_(-1e4)
        assert torch.all(d(r(2, 4, 16, 16), 10) == SCORE_EPS)

    def test_features_mirror_denoiser_and_train(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        d = LatentDiscriminator(den.unet)
        src = dict(den.unet.inputs.named_parameters())
        for name, p in d.features.named_parameters():
            assert torch.equal(p, src[name]) and p.requires_grad

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            discriminate(torch.zeros(4, 16, 16), 1, self._disc())

    def test_loss_values(self):
        assert generator_gan_loss(torch.tensor([0.5])).item() == pytest.approx(math.log(2))
        assert generator_gan_loss(torch.tensor([0.25, 0.5])).item() == pytest.approx((math.log(4) + math.log(2)) / 2)
        assert generator_gan_loss(torch.tensor([1 - SCORE_EPS])).item() == pytest.approx(0, abs=2e-6)
        half = torch.tensor([0.5])
        assert discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2))
        assert discriminator_loss(torch.tensor([0.75]), torch.tensor([0.25])).item() == pytest.approx(
            -2 * math.log(0.25))
        assert discriminator_loss(torch.tensor([1e-12]), torch.tensor([1 - 1e-12])).item() == pytest.approx(0, abs=1e-9)

    def test_discriminator_loss_touches_only_discriminator(self):
        torch.manual_seed(0)
        den = Denoiser(TINY)
        den.attach_control()
        d = LatentDiscriminator(den.unet, hidden=16)
        with torch.no_grad():
            d.head.fc2.weight.normal_()
        y_c = r(2, 4, 16, 16)
        y_r = decode_one_step(y_c, 999, 0, den, S)
        pair = sample_noisy_pair(y_c, y_r.detach(), S, Rng(0))
        loss = discriminator_loss(d(pair.yr_t, pair.t), d(pair.y0_t, pair.t))
        loss.backward()
        assert all(p.grad is None for p in den.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in d.parameters())

    def test_pair_shared_noise_identical(self):
        y = r(2, 4, 16, 16)
        pair = sample_noisy_pair(y, y.clone(), S, Rng(1), shared_noise=True)
        assert torch.equal(pair.y0_t, pair.yr_t)

    def test_pair_t_range_and_uniformity(self):
        rng = Rng(0)
        y = torch.zeros(10_000, 1, 1, 1)
        t = sample_noisy_pair(y, y, S, rng, t_max=20).t
        assert t.min() >= 1 and t.max() <= 20
        counts = np.bincount(t, minlength=21)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_default_t_max_is_half_T(self):
        t = sample_noisy_pair(torch.zeros(5000, 1, 1, 1), torch.zeros(5000, 1, 1, 1), S, Rng(2)).t
        assert t.max() <= 500 and t.max() > 480
