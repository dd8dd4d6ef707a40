"""Conditional encoder: pixel tokens -> diagonal Gaussian posterior.

The image under test (HR, SR or a generated sample) and the reference image
are both turned into sets of ``RGB + posenc(coord)`` tokens. The image tokens
go through self-attention, then cross-attend to the reference tokens; a mean
pool and a linear head give ``(mean, log_var)``. No sequence-position
information is injected, so the output does not depend on token order.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .core import CoordGrid, ImageTensor, make_coord_grid
from .posenc import PosEncConfig, encode

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 20.0


def as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var shapes differ")
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all()):
            raise FloatingPointError("non-finite latent distribution")
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def standard(cls, d_z, batch=None, dtype=torch.float32):
        shape = (d_z,) if batch is None else (batch, d_z)
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))


def reparameterize(dist: LatentDistribution, rng) -> torch.Tensor:
    eps = torch.randn(
        dist.mean.shape, generator=as_generator(rng), dtype=dist.mean.dtype, device=dist.mean.device
    )
    return dist.mean + torch.exp(0.5 * dist.log_var) * eps


def sample_prior(d_z: int, rng, batch: int | None = None, dtype=torch.float32) -> torch.Tensor:
    shape = (d_z,) if batch is None else (batch, d_z)
    return torch.randn(shape, generator=as_generator(rng), dtype=dtype)


# -- tokenization ---------------------------------------------------------------


def sample_indices(population: int, n: int, rng) -> torch.Tensor:
    """``n`` distinct indices drawn uniformly from ``range(population)``."""
    if n > population:
        raise ValueError(f"cannot sample {n} tokens from {population} pixels")
    if n < 1:
        raise ValueError("token count must be positive")
    return torch.randperm(population, generator=as_generator(rng))[:n]


def make_tokens(rgb, coords, posenc: PosEncConfig):
    """Concatenate signed RGB (..., 3) with the encoding of coords (..., 2)."""
    return torch.cat([rgb, encode(coords, posenc)], dim=-1)


def to_pixel_sampler(img: ImageTensor, grid: CoordGrid, n: int, rng, posenc: PosEncConfig, dtype=torch.float64):
    """Sample ``n`` (coordinate, RGB) pairs of ``img`` without replacement.

    ``grid`` must be the image's own pixel grid (row-major). Returns the
    (n, 3 + code_dim) token tensor and the sampled pixel indices.
    """
    if len(grid) != img.height * img.width:
        raise ValueError("grid does not match the image's pixel count")
    idx = sample_indices(len(grid), n, rng)
    rgb = torch.as_tensor(img.to_signed().data.reshape(img.shape[0], -1).T, dtype=dtype)
    coords = torch.as_tensor(grid.coords, dtype=dtype)
    return make_tokens(rgb[idx], coords[idx], posenc), idx


# -- network --------------------------------------------------------------------


class _FeedForward(nn.Module):
    def __init__(self, width, mult=2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(width, width * mult), nn.GELU(), nn.Linear(width * mult, width))

    def forward(self, x):
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ff = _FeedForward(width)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ff = _FeedForward(width)

    def forward(self, x, ref):
        kv = self.norm_kv(ref)
        x = x + self.attn(self.norm_q(x), kv, kv, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class ConditionalEncoder(nn.Module):
    def __init__(self, posenc: PosEncConfig | None = None, width=128, heads=4, n_self=2, n_cross=1, d_z=64):
        super().__init__()
        self.posenc = posenc or PosEncConfig(10, 2)
        self.d_z = d_z
        token_dim = 3 + self.posenc.code_dim
        self.embed_y = nn.Linear(token_dim, width)
        self.embed_r = nn.Linear(token_dim, width)
        self.self_blocks = nn.ModuleList([SelfAttentionBlock(width, heads) for _ in range(n_self)])
        self.cross_blocks = nn.ModuleList([CrossAttentionBlock(width, heads) for _ in range(n_cross)])
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 2 * d_z)

    def forward(self, y_tokens, r_tokens) -> LatentDistribution:
        """y_tokens (B, n, D), r_tokens (B, m, D) -> batched LatentDistribution (B, d_z)."""
        if y_tokens.shape[-2] == 0 or r_tokens.shape[-2] == 0:
            raise ValueError("token sequences must be non-empty")
        x = self.embed_y(y_tokens)
        r = self.embed_r(r_tokens)
        for blk in self.self_blocks:
            x = blk(x)
        for blk in self.cross_blocks:
            x = blk(x, r)
        pooled = self.norm(x).mean(dim=-2)
        mean, log_var = self.head(pooled).chunk(2, dim=-1)
        return LatentDistribution(mean, log_var)


def encode_posterior(y_tokens, r_tokens, model: ConditionalEncoder) -> LatentDistribution:
    """Unbatched convenience wrapper: (n, D), (m, D) -> distribution over d_z."""
    dist = model(y_tokens[None], r_tokens[None])
    return LatentDistribution(dist.mean[0], dist.log_var[0])


def tokens_from_image(img: ImageTensor, n: int, rng, posenc: PosEncConfig, dtype=torch.float64):
    """Tokenize an image at its native resolution (its own pixel grid)."""
    return to_pixel_sampler(img, make_coord_grid(img.height, img.width), n, rng, posenc, dtype)[0]

