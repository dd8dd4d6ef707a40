"""Sinusoidal coordinate encoding and its low/high frequency band split.

Layout of an encoded vector, for ``d`` input components and ``L`` octaves::

    [sin(2^0 pi o_0), cos(2^0 pi o_0), ..., sin(2^(L-1) pi o_0), cos(2^(L-1) pi o_0),
     sin(2^0 pi o_1), ...]

i.e. component-major, octave-minor, sine before cosine. The low band holds
octaves ``0 .. L/2 - 1`` of every component, the high band the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PosEncConfig:
    degree_L: int = 10
    input_dim: int = 2
    # L = 0 (empty codes) is only legal for ablation runs
    ablation: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.degree_L == 0 and self.ablation:
            return
        if self.degree_L < 2 or self.degree_L % 2:
            raise ValueError(f"degree_L must be even and >= 2, got {self.degree_L}")

    @property
    def code_dim(self) -> int:
        return 2 * self.degree_L * self.input_dim

    @property
    def band_dim(self) -> int:
        return self.degree_L * self.input_dim


def _as_tensor(o):
    if isinstance(o, torch.Tensor):
        return o, False
    return torch.as_tensor(np.asarray(o, dtype=np.float64)), True


def encode(o, cfg: PosEncConfig):
    """Encode the trailing axis of ``o`` (size ``input_dim``).

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    t, was_numpy = _as_tensor(o)
    if t.shape[-1] != cfg.input_dim:
        raise ValueError(f"expected trailing dim {cfg.input_dim}, got {t.shape[-1]}")
    if torch.any(t.detach().abs() > 1.0):
        raise ValueError("positional encoding inputs must lie in [-1, 1]")
    L = cfg.degree_L
    if L == 0:
        out = t.new_zeros(*t.shape[:-1], 0)
    else:
        freqs = math.pi * 2.0 ** torch.arange(L, dtype=t.dtype, device=t.device)
        ang = t.unsqueeze(-1) * freqs  # (..., d, L)
        out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., d, L, 2)
        out = out.reshape(*t.shape[:-1], cfg.code_dim)
    return out.numpy() if was_numpy else out


def encode_derivative(o, cfg: PosEncConfig) -> np.ndarray:
    """Closed-form d(code)/d(o_c), laid out like ``encode`` (each entry w.r.t. its own component)."""
    o = np.asarray(o, dtype=np.float64)
    freqs = math.pi * 2.0 ** np.arange(cfg.degree_L)
    ang = o[..., None] * freqs
    d = np.stack([freqs * np.cos(ang), -freqs * np.sin(ang)], axis=-1)
    return d.reshape(*o.shape[:-1], cfg.code_dim)


def _band_index(cfg: PosEncConfig):
    L, half = cfg.degree_L, cfg.degree_L // 2
    low, high = [], []
    for c in range(cfg.input_dim):
        base = c * 2 * L
        low.extend(range(base, base + 2 * half))
        high.extend(range(base + 2 * half, base + 2 * L))
    return np.array(low, dtype=np.int64), np.array(high, dtype=np.int64)


def split_bands(code, cfg: PosEncConfig):
    """Return ``(lfc, hfc)`` along the trailing axis of an encoded array."""
    if code.shape[-1] != cfg.code_dim:
        raise ValueError(f"code length {code.shape[-1]} != {cfg.code_dim}")
    low, high = _band_index(cfg)
    if isinstance(code, torch.Tensor):
        low = torch.from_numpy(low).to(code.device)
        high = torch.from_numpy(high).to(code.device)
        return code.index_select(-1, low), code.index_select(-1, high)
    return code[..., low], code[..., high]


def merge_bands(lfc, hfc, cfg: PosEncConfig):
    """Inverse of ``split_bands``."""
    low, high = _band_index(cfg)
    perm = np.concatenate([low, high])
    inv = np.argsort(perm)
    if isinstance(lfc, torch.Tensor):
        return torch.cat([lfc, hfc], dim=-1)[..., torch.from_numpy(inv)]
    return np.concatenate([lfc, hfc], axis=-1)[..., inv]
