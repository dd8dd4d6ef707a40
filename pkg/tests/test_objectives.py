import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck_util import pipeline_grad_errors, toy_pipeline
from svaesr.core import ImageTensor, make_coord_grid
from svaesr.decoder import query_rgb
from svaesr.encoder import LatentDistribution, encode_posterior, make_tokens, reparameterize
from svaesr.objectives import (
    ObjectiveConfig,
    decoder_loss,
    elbo,
    encoder_loss,
    kl_divergence,
    total_loss,
)
from svaesr.posenc import PosEncConfig
from svaesr.trainer import decoder_objective

elbo_vals = st.floats(-10.0, 5.0)


def dist(mean, log_var):
    return LatentDistribution(torch.tensor(mean, dtype=torch.float64), torch.tensor(log_var, dtype=torch.float64))


def kl_monte_carlo(d, n, seed):
    """E_q[log q(z) - log p(z)] from ``n`` samples."""
    gen = torch.Generator().manual_seed(seed)
    std = torch.exp(0.5 * d.log_var)
    eps = torch.randn(n, d.mean.numel(), generator=gen, dtype=torch.float64)
    z = d.mean + std * eps
    log_q = (-0.5 * eps**2 - 0.5 * d.log_var).sum(-1)
    log_p = (-0.5 * z**2).sum(-1)
    return float((log_q - log_p).mean())


class TestKL:
    def test_prior_is_zero(self):
        assert kl_divergence(dist([0.0, 0.0], [0.0, 0.0])).item() == 0.0

    def test_unit_mean(self):
        assert kl_divergence(dist([1.0], [0.0])).item() == pytest.approx(0.5)

    def test_monte_carlo(self):
        d = dist([0.7, -1.2, 0.3], [0.5, -0.8, 0.1])
        mc = kl_monte_carlo(d, 10**6, 0)
        assert abs(mc - kl_divergence(d).item()) / kl_divergence(d).item() < 0.01

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-8, 8)), min_size=1, max_size=6))
    def test_non_negative(self, pairs):
        d = dist([p[0] for p in pairs], [p[1] for p in pairs])
        assert kl_divergence(d).item() >= -1e-15

    @given(st.floats(-1e-2, 1e-2), st.floats(-1e-2, 1e-2))
    def test_positive_off_prior(self, m, lv):
        # below ~1e-7 the log-variance term is lost to rounding
        kl = kl_divergence(dist([m], [lv])).item()
        if abs(m) > 1e-6 or abs(lv) > 1e-6:
            assert kl > 0


class TestAdversarialLosses:
    def test_saturation(self):
        cfg = ObjectiveConfig(alpha=2.0)
        assert encoder_loss(0.0, [-20.0], cfg).item() < 1e-8
        assert encoder_loss(0.0, [-1e6], cfg).item() == 0.0

    def test_alpha_one_example(self):
        assert encoder_loss(0.0, [0.0], ObjectiveConfig(alpha=1.0)).item() == pytest.approx(1.0)

    def test_soft_exp_derivative(self):
        cfg = ObjectiveConfig(alpha=2.0)
        h = 1e-6
        fd = (encoder_loss(0.3, [-1 + h], cfg) - encoder_loss(0.3, [-1 - h], cfg)).item() / (2 * h)
        assert fd == pytest.approx(math.exp(-2), rel=1e-6)

    def test_gamma_zero_plain_vae(self):
        assert decoder_loss(-0.4, [-3.0], ObjectiveConfig(gamma=1e-300)).item() == pytest.approx(0.4)

    def test_gamma_one_equal(self):
        assert decoder_loss(-0.7, [-0.7], ObjectiveConfig(gamma=1.0)).item() == pytest.approx(1.4)

    def test_needs_a_fake(self):
        with pytest.raises(ValueError):
            encoder_loss(0.0, [], ObjectiveConfig())
        with pytest.raises(ValueError):
            decoder_loss(0.0, [], ObjectiveConfig())

    @given(elbo_vals, st.lists(elbo_vals, min_size=1, max_size=4), st.integers(0, 3))
    @settings(max_examples=100)
    def test_monotonicity_signs(self, real, fakes, which):
        cfg = ObjectiveConfig()
        h = 1e-4
        which = which % len(fakes)
        up = [f + h if i == which else f for i, f in enumerate(fakes)]
        assert encoder_loss(real + h, fakes, cfg) < encoder_loss(real, fakes, cfg)
        assert encoder_loss(real, up, cfg) > encoder_loss(real, fakes, cfg)
        assert decoder_loss(real + h, fakes, cfg) < decoder_loss(real, fakes, cfg)
        assert decoder_loss(real, up, cfg) < decoder_loss(real, fakes, cfg)

    def test_clamp_counter(self):
        stats = {}
        loss = encoder_loss(0.0, [15.0, 0.0], ObjectiveConfig(alpha=2.0), stats)
        assert stats["exp_clamped"] == 1
        assert math.isfinite(loss.item())


class TestTotalLoss:
    def test_perfect(self):
        x = torch.rand(10, 3, dtype=torch.float64)
        loss, _ = total_loss(x, x, dist([0.0] * 4, [0.0] * 4), ObjectiveConfig())
        assert loss.item() == 0.0

    def test_plain_l1(self):
        a, b = torch.zeros(4, 3), torch.full((4, 3), 0.25)
        loss, parts = total_loss(a, b, dist([2.0], [1.0]), ObjectiveConfig(lambda_rec=0.0, beta_kl=0.0))
        assert loss.item() == pytest.approx(0.25)
        assert parts["l1"].item() == pytest.approx(0.25)

    def test_hand_computed(self):
        a = torch.tensor([[0.0, 0.5, 1.0]], dtype=torch.float64)
        b = torch.tensor([[0.2, 0.5, 0.4]], dtype=torch.float64)
        d = dist([1.0, 0.0], [0.0, 1.0])
        kl = 0.5 * (1 + 1 - 1 - 0) + 0.5 * (0 + math.e - 1 - 1)
        l1 = (0.2 + 0.0 + 0.6) / 3
        loss, parts = total_loss(a, b, d, ObjectiveConfig(lambda_rec=1.0, beta_kl=0.1))
        assert loss.item() == pytest.approx(l1 + l1 + 0.1 * kl, abs=1e-12)
        assert parts["kl_term"].item() == pytest.approx(0.1 * kl)

    def test_image_tensors_and_shape_check(self):
        a = ImageTensor(np.full((3, 4, 4), 0.5))
        b = ImageTensor(np.full((3, 4, 4), 0.75))
        loss, _ = total_loss(a, b, None, ObjectiveConfig())
        assert loss.item() == pytest.approx(2 * 0.5)  # signed range doubles the gap
        with pytest.raises(ValueError):
            total_loss(a, ImageTensor(np.zeros((3, 4, 5))), None, ObjectiveConfig())


class _Echo(nn.Module):
    """Fake decoder that renders ``target + offset`` at every query."""

    def __init__(self, target: ImageTensor, offset=0.0):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.rgb = torch.as_tensor(target.to_signed().data.reshape(3, -1).T)
        self.offset = offset

    def extract_features(self, lr):
        return lr

    def hf_signal(self, z):
        return z

    def query_rgb(self, feat, coords, cells, hf=None):
        return (self.rgb + self.offset)[None]


class _Prior(nn.Module):
    def __init__(self, d_z=3):
        super().__init__()
        self.posenc = PosEncConfig(2, 2)
        self.d_z = d_z

    def forward(self, y, r):
        shape = (y.shape[0], self.d_z)
        return LatentDistribution(torch.zeros(shape, dtype=y.dtype), torch.zeros(shape, dtype=y.dtype))


class TestElbo:
    img = ImageTensor(np.random.default_rng(0).uniform(0.2, 0.8, (3, 6, 6)))

    def test_perfect_decoder_and_prior(self):
        value, parts = elbo(self.img, self.img, _Prior(), _Echo(self.img), self.img, 0, ObjectiveConfig())
        assert value.item() == 0.0
        assert parts["kl"].item() == 0.0

    def test_worse_reconstruction_lowers_elbo(self):
        vals = [elbo(self.img, self.img, _Prior(), _Echo(self.img, off), self.img, 0, ObjectiveConfig())[0].item()
                for off in (0.0, 0.05, 0.1, 0.3)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_compositional_oracle(self):
        cfg, enc, dec, _, _ = toy_pipeline()
        rng = np.random.default_rng(1)
        target = ImageTensor(rng.random((3, 10, 10)))
        ref = ImageTensor(rng.random((3, 9, 9)))
        lr = ImageTensor(rng.random((3, 5, 5)))
        got, parts = elbo(target, ref, enc, dec, lr, 42, cfg.objective, n_tokens=20)

        gen = torch.Generator().manual_seed(42)
        tgrid, rgrid = make_coord_grid(10, 10), make_coord_grid(9, 9)
        t_rgb = torch.as_tensor(target.to_signed().data.reshape(3, -1).T)
        r_rgb = torch.as_tensor(ref.to_signed().data.reshape(3, -1).T)
        yi = torch.randperm(100, generator=gen)[:20]
        ri = torch.randperm(81, generator=gen)[:20]
        y_tok = make_tokens(t_rgb[yi], torch.as_tensor(tgrid.coords)[yi], cfg.posenc)
        r_tok = make_tokens(r_rgb[ri], torch.as_tensor(rgrid.coords)[ri], cfg.posenc)
        d = encode_posterior(y_tok, r_tok, enc)
        z = reparameterize(d, gen)
        feat = dec.extract_features(torch.as_tensor(lr.to_signed().data)[None])[0]
        pred = query_rgb(feat, tgrid, dec.hf_signal(z[None])[0], dec)
        recon = (pred - t_rgb).abs().mean()
        want = -recon - kl_divergence(d)
        torch.testing.assert_close(got, want, atol=1e-12, rtol=0)
        torch.testing.assert_close(parts["recon"], recon, atol=1e-12, rtol=0)


class TestPipelineGradients:
    def test_decoder_loss_reaches_both_branches(self):
        cfg, enc, dec, batch, tokens = toy_pipeline()
        _, parts = decoder_objective(enc, dec, batch, tokens, torch.Generator().manual_seed(0), cfg)
        real = -parts["real"].elbo.mean()
        fake = -torch.cat([t.elbo for t in parts["fakes"]]).mean()
        params = [p for p in dec.parameters()]
        g_real = torch.autograd.grad(real, params, retain_graph=True, allow_unused=True)
        g_fake = torch.autograd.grad(fake, params, allow_unused=True)
        norm = lambda gs: sum(float(g.abs().sum()) for g in gs if g is not None)  # noqa: E731
        assert norm(g_real) > 0 and norm(g_fake) > 0

    def test_finite_differences(self):
        errs = pipeline_grad_errors(per_tensor=2)
        for name, (err, where) in errs.items():
            assert err <= 1e-3, f"{name}: {where}"
