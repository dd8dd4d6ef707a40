"""Training objectives.

Both adversarial losses are written in *minimization* form:

* encoder: ``-ELBO(real) + mean_fake exp(alpha * ELBO(fake)) / alpha`` -- the
  encoder raises the ELBO of real images and pushes generated samples down
  until the soft exponential saturates;
* decoder: ``-ELBO(real) - gamma * mean_fake ELBO(fake)`` -- the decoder tries
  to make its samples look real to the encoder.

The ELBO uses a Laplace (L1) reconstruction term averaged per pixel:
``ELBO = -recon_scale * mean|x_hat - x| - KL(q || N(0, I))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .core import ImageTensor, make_coord_grid
from .encoder import LatentDistribution, as_generator, make_tokens, reparameterize, sample_indices


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 2.0
    gamma: float = 0.5
    lambda_rec: float = 1.0
    beta_kl: float = 0.01
    recon_scale: float = 1.0
    exp_clamp: float = 20.0

    def __post_init__(self):
        vals = (self.alpha, self.gamma, self.lambda_rec, self.beta_kl, self.recon_scale, self.exp_clamp)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("objective weights must be finite")
        if self.alpha <= 0 or self.gamma <= 0 or self.recon_scale <= 0:
            raise ValueError("alpha, gamma and recon_scale must be positive")
        if self.lambda_rec < 0 or self.beta_kl < 0:
            raise ValueError("lambda_rec and beta_kl must be non-negative")


def kl_divergence(dist: LatentDistribution):
    """KL(N(mean, exp(log_var)) || N(0, I)), summed over the last axis."""
    lv = dist.log_var
    return 0.5 * torch.sum(dist.mean.pow(2) + lv.exp() - 1.0 - lv, dim=-1)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _flat_fakes(fake_elbos):
    if isinstance(fake_elbos, torch.Tensor):
        fakes = fake_elbos.reshape(-1)
    else:
        fakes = [_as_tensor(f).reshape(-1) for f in fake_elbos]
        if not fakes:
            raise ValueError("need at least one fake ELBO")
        fakes = torch.cat(fakes)
    if fakes.numel() == 0:
        raise ValueError("need at least one fake ELBO")
    return fakes


def soft_exp(fake_elbo, cfg: ObjectiveConfig, stats: dict | None = None):
    """``exp(alpha * x) / alpha`` with the exponent clamped at ``cfg.exp_clamp``."""
    arg = cfg.alpha * fake_elbo
    if stats is not None:
        stats["exp_clamped"] = stats.get("exp_clamped", 0) + int((arg.detach() > cfg.exp_clamp).sum())
    return torch.exp(arg.clamp(max=cfg.exp_clamp)) / cfg.alpha


def encoder_loss(real_elbo, fake_elbos, cfg: ObjectiveConfig, stats: dict | None = None):
    real = _as_tensor(real_elbo).mean()
    fakes = _flat_fakes(fake_elbos)
    return -real + soft_exp(fakes, cfg, stats).mean()


def decoder_loss(real_elbo, fake_elbos, cfg: ObjectiveConfig):
    real = _as_tensor(real_elbo).mean()
    return -real - cfg.gamma * _flat_fakes(fake_elbos).mean()


def _pixels(x):
    if isinstance(x, ImageTensor):
        return torch.as_tensor(x.to_signed().data)
    return x


def total_loss(sr, hr, dist: LatentDistribution | None, cfg: ObjectiveConfig):
    """``L1 + lambda_rec * L1 + beta_kl * KL``; the two pixel terms are the same L1."""
    sr, hr = _pixels(sr), _pixels(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {tuple(sr.shape)} vs {tuple(hr.shape)}")
    l1 = (sr - hr).abs().mean()
    kl = kl_divergence(dist).mean() if dist is not None else l1.new_zeros(())
    rec = cfg.lambda_rec * l1
    kl_term = cfg.beta_kl * kl
    return l1 + rec + kl_term, {"l1": l1, "rec": rec, "kl": kl, "kl_term": kl_term}


class ElboTerms(NamedTuple):
    elbo: torch.Tensor  # (B,)
    recon: torch.Tensor  # (B,) mean absolute error per sample
    kl: torch.Tensor  # (B,)
    dist: LatentDistribution
    z: torch.Tensor
    pred: torch.Tensor  # (B, Q, 3)


def elbo_terms(encoder, decoder, feat, y_tokens, r_tokens, coords, cells, target, rng, cfg: ObjectiveConfig) -> ElboTerms:
    """Single-sample ELBO of ``target`` (B, Q, 3) observed at ``coords``.

    The encoder sees ``y_tokens`` (the image under test) and ``r_tokens``
    (the reference); ``feat`` are the LR features that condition the decoder.
    """
    dist = encoder(y_tokens, r_tokens)
    z = reparameterize(dist, rng)
    pred = decoder.query_rgb(feat, coords, cells, decoder.hf_signal(z))
    recon = (pred - target).abs().flatten(1).mean(dim=1)
    kl = kl_divergence(dist)
    return ElboTerms(-cfg.recon_scale * recon - kl, recon, kl, dist, z, pred)


def elbo(target: ImageTensor, ref: ImageTensor, encoder, decoder, lr_context: ImageTensor, rng, cfg: ObjectiveConfig, n_tokens: int | None = None):
    """ELBO of one image given a reference, reconstructing every pixel of ``target``.

    ``n_tokens`` caps how many pixels of each image the encoder sees (all by default).
    """
    p = next(decoder.parameters())
    posenc = encoder.posenc
    rng = as_generator(rng)

    def pixels(img):
        grid = make_coord_grid(img.height, img.width)
        rgb = torch.as_tensor(img.to_signed().data.reshape(3, -1).T, dtype=p.dtype)
        return rgb, torch.as_tensor(grid.coords, dtype=p.dtype), torch.as_tensor(grid.cells, dtype=p.dtype)

    t_rgb, t_coords, t_cells = pixels(target)
    r_rgb, r_coords, _ = pixels(ref)
    ny = len(t_rgb) if n_tokens is None else n_tokens
    nr = len(r_rgb) if n_tokens is None else n_tokens
    yi = sample_indices(len(t_rgb), ny, rng)
    ri = sample_indices(len(r_rgb), nr, rng)
    y_tok = make_tokens(t_rgb[yi], t_coords[yi], posenc)[None]
    r_tok = make_tokens(r_rgb[ri], r_coords[ri], posenc)[None]
    lr = torch.as_tensor(lr_context.to_signed().data, dtype=p.dtype)[None]
    feat = decoder.extract_features(lr)
    terms = elbo_terms(encoder, decoder, feat, y_tok, r_tok, t_coords[None], t_cells[None], t_rgb[None], rng, cfg)
    return terms.elbo[0], {"recon": terms.recon[0], "kl": terms.kl[0]}
