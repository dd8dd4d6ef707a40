import numpy as np
import pytest
import torch

from gradcheck_util import param_grad_error
from svaesr.core import ImageTensor, make_coord_grid
from svaesr.encoder import (
    ConditionalEncoder,
    LatentDistribution,
    encode_posterior,
    reparameterize,
    sample_prior,
    to_pixel_sampler,
    tokens_from_image,
)
from svaesr.posenc import PosEncConfig, encode

PE = PosEncConfig(4, 2)


def toy_encoder(seed=0, d_z=6):
    torch.manual_seed(seed)
    return ConditionalEncoder(PE, width=16, heads=2, n_self=1, n_cross=1, d_z=d_z).double()


def rand_img(h, w, seed=0):
    return ImageTensor(np.random.default_rng(seed).random((3, h, w)))


class TestPixelSampler:
    def test_exhaustive_is_permutation(self):
        img = rand_img(5, 6)
        grid = make_coord_grid(5, 6)
        tokens, idx = to_pixel_sampler(img, grid, 30, 0, PE)
        assert sorted(idx.tolist()) == list(range(30))
        full = img.to_signed().data.reshape(3, -1).T
        got = tokens[:, :3].numpy()
        assert sorted(map(tuple, got)) == sorted(map(tuple, full))

    def test_deterministic(self):
        img = rand_img(8, 8)
        a, _ = to_pixel_sampler(img, make_coord_grid(8, 8), 20, 7, PE)
        b, _ = to_pixel_sampler(img, make_coord_grid(8, 8), 20, 7, PE)
        assert torch.equal(a, b)

    def test_budget_from_96px(self):
        tokens = tokens_from_image(rand_img(96, 96), 48 * 48, 0, PosEncConfig(10, 2))
        assert tokens.shape == (2304, 3 + 40)

    def test_too_many(self):
        with pytest.raises(ValueError):
            to_pixel_sampler(rand_img(3, 3), make_coord_grid(3, 3), 10, 0, PE)

    def test_token_layout(self):
        img = rand_img(4, 4)
        grid = make_coord_grid(4, 4)
        tokens, idx = to_pixel_sampler(img, grid, 5, 1, PE)
        i = idx[0].item()
        np.testing.assert_allclose(tokens[0, 3:].numpy(), encode(grid.coords[i], PE))
        np.testing.assert_allclose(tokens[0, :3].numpy(), img.to_signed().data.reshape(3, -1)[:, i])


class TestPosterior:
    def test_shapes(self):
        enc = ConditionalEncoder(PosEncConfig(10, 2), d_z=64).double()
        y = torch.randn(30, 43, dtype=torch.float64)
        dist = encode_posterior(y, y, enc)
        assert dist.mean.shape == (64,) and dist.log_var.shape == (64,)

    def test_zero_head_gives_bias(self):
        enc = toy_encoder()
        with torch.no_grad():
            enc.head.weight.zero_()
        a = encode_posterior(torch.randn(9, 19, dtype=torch.float64), torch.randn(7, 19, dtype=torch.float64), enc)
        b = encode_posterior(torch.randn(9, 19, dtype=torch.float64), torch.randn(7, 19, dtype=torch.float64), enc)
        torch.testing.assert_close(a.mean, enc.head.bias[:6])
        torch.testing.assert_close(a.log_var, b.log_var)

    def test_permutation_invariant(self):
        enc = toy_encoder()
        y = torch.randn(12, 19, dtype=torch.float64)
        r = torch.randn(10, 19, dtype=torch.float64)
        base = encode_posterior(y, r, enc)
        y2 = y.clone()
        y2[[0, 5]] = y2[[5, 0]]
        swapped = encode_posterior(y2, r, enc)
        shuffled = encode_posterior(y[torch.randperm(12)], r[torch.randperm(10)], enc)
        for other in (swapped, shuffled):
            assert (other.mean - base.mean).abs().max() < 1e-6
            assert (other.log_var - base.log_var).abs().max() < 1e-6

    def test_log_var_clamped(self):
        d = LatentDistribution(torch.zeros(3), torch.tensor([-100.0, 0.0, 100.0]))
        assert d.log_var.tolist() == [-30.0, 0.0, 20.0]

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            LatentDistribution(torch.tensor([float("nan")]), torch.zeros(1))

    def test_empty_tokens(self):
        enc = toy_encoder()
        with pytest.raises(ValueError):
            enc(torch.zeros(1, 0, 19, dtype=torch.float64), torch.zeros(1, 3, 19, dtype=torch.float64))

    def test_gradients_with_frozen_sampling(self):
        enc = toy_encoder(seed=2)
        img, ref = rand_img(6, 6, 1), rand_img(5, 5, 2)
        y = tokens_from_image(img, 12, 3, PE)
        r = tokens_from_image(ref, 10, 4, PE)
        w = torch.randn(2, 6, dtype=torch.float64)

        def loss():
            d = encode_posterior(y, r, enc)
            return (d.mean * w[0]).sum() + (d.log_var * w[1]).sum()

        err, where = param_grad_error(loss, [enc], per_tensor=6)
        assert err <= 1e-3, where


class TestSampling:
    def test_vanishing_noise(self):
        d = LatentDistribution(torch.tensor([0.3, -2.0], dtype=torch.float64), torch.full((2,), -40.0, dtype=torch.float64))
        z = reparameterize(d, 0)
        assert (z - d.mean).abs().max() < 1e-6

    def test_deterministic(self):
        d = LatentDistribution(torch.zeros(5), torch.zeros(5))
        assert torch.equal(reparameterize(d, 3), reparameterize(d, 3))
        assert torch.equal(sample_prior(5, 3), sample_prior(5, 3))
        assert sample_prior(7, 0).shape == (7,)

    def test_monte_carlo_mean(self):
        mean = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
        log_var = torch.tensor([0.0, 1.0, -1.0], dtype=torch.float64)
        d = LatentDistribution(mean.expand(10**6, 3), log_var.expand(10**6, 3))
        z = reparameterize(d, 0)
        se = torch.exp(0.5 * log_var) / 1000.0
        assert torch.all((z.mean(0) - mean).abs() < 4 * se)

    def test_prior_covariance(self):
        z = sample_prior(4, 0, batch=10**5, dtype=torch.float64).numpy()
        cov = np.cov(z.T)
        assert np.max(np.abs(cov - np.eye(4))) < 0.05

    def test_pathwise_gradient_wrt_mean(self):
        mean = torch.zeros(4, dtype=torch.float64, requires_grad=True)
        log_var = torch.full((4,), 0.7, dtype=torch.float64, requires_grad=True)
        z = reparameterize(LatentDistribution(mean, log_var), 5)
        z.sum().backward()
        assert torch.equal(mean.grad, torch.ones(4, dtype=torch.float64))
