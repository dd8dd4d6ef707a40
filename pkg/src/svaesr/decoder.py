"""Feature extractor and local implicit image decoder.

The decoder renders RGB at arbitrary continuous coordinates of an LR feature
map. Each query gathers its four nearest latent codes (local ensemble), each
unfolded with its 3x3 neighbourhood, and evaluates a two-stage MLP:

* stage 1 sees the code, the relative offset to the code center, the low
  band of the offset's positional encoding and the query cell size;
* stage 2 sees the stage-1 activations, the high band of the encoding and a
  per-query high-frequency signal projected from the latent vector ``z``.

The four predictions are blended with opposite-corner area weights.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CoordGrid, ImageTensor, make_coord_grid
from .posenc import PosEncConfig, encode, split_bands

# BLAS picks a different kernel for very short matrices; padding every MLP
# call to at least this many rows keeps chunked inference bit-identical.
MIN_ROWS = 32

_EDGE = 1e-6
_EPS_SHIFT = 1e-6


class ResBlock(nn.Module):
    def __init__(self, n_feats, res_scale=1.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(n_feats, n_feats, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(n_feats, n_feats, 3, padding=1),
        )
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.body(x) * self.res_scale


class FeatureExtractor(nn.Module):
    """EDSR-style residual conv stack; keeps the input's spatial size."""

    def __init__(self, n_feats=64, n_resblocks=8, in_channels=3):
        super().__init__()
        self.head = nn.Conv2d(in_channels, n_feats, 3, padding=1)
        self.body = nn.Sequential(
            *[ResBlock(n_feats) for _ in range(n_resblocks)],
            nn.Conv2d(n_feats, n_feats, 3, padding=1),
        )
        self.out_dim = n_feats

    def forward(self, x):
        x = self.head(x)
        return x + self.body(x)


def _mlp(in_dim, hidden, out_dim=None):
    layers, last = [], in_dim
    for h in hidden:
        layers += [nn.Linear(last, h), nn.ReLU()]
        last = h
    if out_dim is not None:
        layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


def _run_rows(net, x):
    """Apply ``net`` to the rows of ``x`` (..., D), padding short calls."""
    lead = x.shape[:-1]
    rows = x.reshape(-1, x.shape[-1])
    n = rows.shape[0]
    if 0 < n < MIN_ROWS:
        rows = torch.cat([rows, rows[-1:].expand(MIN_ROWS - n, -1)])
    out = net(rows)[:n]
    return out.reshape(*lead, out.shape[-1])


def nearest_code_index(coord, size: int, shift: float):
    """Index of the latent code whose cell contains ``coord + shift`` (clamped).

    A point on a cell boundary goes to the lower index.
    """
    s = (coord + shift).clamp(-1 + _EDGE, 1 - _EDGE)
    idx = torch.ceil((s + 1) / 2 * size) - 1
    return idx.clamp(0, size - 1).long()


def code_center(idx, size: int, dtype):
    return -1.0 + (2.0 * idx.to(dtype) + 1.0) / size


class LIIFDecoder(nn.Module):
    """Decoder parameters: extractor G, HF fusion head and the render MLP."""

    def __init__(
        self,
        n_feats=64,
        n_resblocks=8,
        posenc: PosEncConfig | None = None,
        hidden=(256, 256, 256, 256),
        d_z=64,
        hf_dim=64,
        feat_unfold=True,
        local_ensemble=True,
        cell_decode=True,
    ):
        super().__init__()
        self.posenc = posenc or PosEncConfig(10, 2)
        if self.posenc.input_dim != 2:
            raise ValueError("decoder encodes 2D offsets")
        self.feat_unfold = feat_unfold
        self.local_ensemble = local_ensemble
        self.cell_decode = cell_decode
        self.d_z = d_z
        self.hf_dim = hf_dim

        self.extractor = FeatureExtractor(n_feats, n_resblocks)
        self.hf_head = nn.Linear(d_z, hf_dim)

        hidden = list(hidden)
        if not hidden:
            raise ValueError("render MLP needs at least one hidden layer")
        split = (len(hidden) + 1) // 2
        code_dim = n_feats * (9 if feat_unfold else 1)
        band = self.posenc.band_dim
        in1 = code_dim + 2 + band + (2 if cell_decode else 0)
        self.stage1 = _mlp(in1, hidden[:split])
        in2 = hidden[split - 1] + band + hf_dim
        self.stage2 = _mlp(in2, hidden[split:], 3)

    # -- feature extraction -------------------------------------------------

    def extract_features(self, lr):
        """(B, 3, h, w) signed-range LR batch -> (B, F, h, w) latent codes."""
        return self.extractor(lr)

    def hf_signal(self, z):
        """Project latent vectors (B, d_z) to the per-image HF signal (B, hf_dim)."""
        return self.hf_head(z)

    # -- rendering ----------------------------------------------------------

    def _shifts(self):
        if self.local_ensemble:
            return [(-1, -1), (-1, 1), (1, -1), (1, 1)], _EPS_SHIFT
        return [(0, 0)], 0.0

    def local_codes(self, coords, size):
        """Nearest-code indices, relative offsets and ensemble weights.

        coords: (B, Q, 2). Returns idx (S, B, Q, 2), rel (S, B, Q, 2) in
        units of one code cell, weights (S, B, Q) summing to 1 over S.
        """
        h, w = size
        shifts, eps = self._shifts()
        idxs, rels, areas = [], [], []
        for vy, vx in shifts:
            iy = nearest_code_index(coords[..., 0], h, vy / h + eps)
            ix = nearest_code_index(coords[..., 1], w, vx / w + eps)
            qy = code_center(iy, h, coords.dtype)
            qx = code_center(ix, w, coords.dtype)
            rel = torch.stack([(coords[..., 0] - qy) * h, (coords[..., 1] - qx) * w], dim=-1)
            idxs.append(torch.stack([iy, ix], dim=-1))
            rels.append(rel)
            areas.append((rel[..., 0] * rel[..., 1]).abs() + 1e-9)
        idx = torch.stack(idxs)
        rel = torch.stack(rels)
        if len(shifts) == 1:
            weights = torch.ones_like(areas[0]).unsqueeze(0)
        else:
            # each prediction is weighted by the area of the diagonally opposite code
            area = torch.stack(areas[::-1])
            weights = area / area.sum(dim=0, keepdim=True)
        return idx, rel, weights

    def render(self, q_feat, rel, rel_cell, hf):
        """Single-code render: all inputs share leading dims; returns (..., 3)."""
        # offsets live in [-2, 2] code cells (up to an eps overshoot); map into [-1, 1]
        code = encode((rel / 2.0).clamp(-1.0, 1.0), self.posenc)
        lfc, hfc = split_bands(code, self.posenc)
        parts = [q_feat, rel, lfc]
        if self.cell_decode:
            parts.append(rel_cell)
        mid = _run_rows(self.stage1, torch.cat(parts, dim=-1))
        return _run_rows(self.stage2, torch.cat([mid, hfc, hf], dim=-1))

    def _code_projection(self, feat):
        """Code part of the first stage-1 layer, applied to every latent code.

        The first layer is linear in the (unfolded) code, so projecting the
        code grid before gathering is the same map; with unfolding the
        projection is exactly a 3x3 convolution.
        """
        first = self.stage1[0]
        c = feat.shape[1]
        k = 3 if self.feat_unfold else 1
        weight = first.weight[:, : c * k * k].reshape(-1, c, k, k)
        return F.conv2d(feat, weight, padding=k // 2)

    def _render_projected(self, q_proj, rel, rel_cell, hf):
        """``render`` with the code term already projected (and gathered)."""
        first = self.stage1[0]
        c = first.in_features - (2 + self.posenc.band_dim + (2 if self.cell_decode else 0))
        code = encode((rel / 2.0).clamp(-1.0, 1.0), self.posenc)
        lfc, hfc = split_bands(code, self.posenc)
        parts = [rel, lfc]
        if self.cell_decode:
            parts.append(rel_cell)
        rest = torch.cat(parts, dim=-1)
        pre = q_proj + _run_rows(lambda x: F.linear(x, first.weight[:, c:], first.bias), rest)
        mid = _run_rows(self.stage1[1:], pre)
        return _run_rows(self.stage2, torch.cat([mid, hfc, hf], dim=-1))

    def query_rgb(self, feat, coords, cells, hf=None):
        """Render (B, Q, 3) signed RGB at coords (B, Q, 2) with cells (B, Q, 2).

        ``hf`` is (B, Q, hf_dim), (B, hf_dim) broadcast over queries, or None
        for a zero signal.
        """
        b, _, h, w = feat.shape
        q = coords.shape[1]
        if q == 0:
            return feat.new_zeros(b, 0, 3)
        table = self._code_projection(feat).flatten(2).transpose(1, 2)  # (B, h*w, H)

        if hf is None:
            hf = feat.new_zeros(b, q, self.hf_dim)
        elif hf.dim() == 2:
            hf = hf[:, None, :].expand(b, q, hf.shape[-1])

        idx, rel, weights = self.local_codes(coords, (h, w))
        s = idx.shape[0]
        flat = idx[..., 0] * w + idx[..., 1]  # (S, B, Q)
        bidx = torch.arange(b, device=feat.device)[None, :, None].expand_as(flat)
        q_proj = table[bidx, flat]  # (S, B, Q, H)
        rel_cell = cells * cells.new_tensor([h, w])
        pred = self._render_projected(
            q_proj,
            rel,
            rel_cell.unsqueeze(0).expand(s, -1, -1, -1),
            hf.unsqueeze(0).expand(s, -1, -1, -1),
        )
        return (pred * weights.unsqueeze(-1)).sum(dim=0)

    def query_rgb_reference(self, feat, coords, cells, hf=None):
        """Unoptimized ``query_rgb``: gathers full unfolded codes and calls ``render``."""
        b, _, h, w = feat.shape
        q = coords.shape[1]
        if self.feat_unfold:
            feat = F.unfold(feat, 3, padding=1).view(b, -1, h, w)
        table = feat.flatten(2).transpose(1, 2)
        if hf is None:
            hf = feat.new_zeros(b, q, self.hf_dim)
        elif hf.dim() == 2:
            hf = hf[:, None, :].expand(b, q, hf.shape[-1])
        idx, rel, weights = self.local_codes(coords, (h, w))
        s = idx.shape[0]
        flat = idx[..., 0] * w + idx[..., 1]
        bidx = torch.arange(b, device=feat.device)[None, :, None].expand_as(flat)
        rel_cell = cells * cells.new_tensor([h, w])
        pred = self.render(table[bidx, flat], rel, rel_cell.unsqueeze(0).expand(s, -1, -1, -1),
                           hf.unsqueeze(0).expand(s, -1, -1, -1))
        return (pred * weights.unsqueeze(-1)).sum(dim=0)


# -- ImageTensor-level operations -------------------------------------------------


def _image_batch(img: ImageTensor, like: nn.Module):
    p = next(like.parameters())
    return torch.as_tensor(img.to_signed().data, dtype=p.dtype, device=p.device)[None]


def extract_features(lr: ImageTensor, model: LIIFDecoder):
    """Latent code grid (F, h, w) for a single LR image."""
    if lr.color_space != "RGB":
        raise ValueError("extractor expects RGB input")
    return model.extract_features(_image_batch(lr, model))[0]


def query_rgb(feat, grid: CoordGrid, hf_signal, model: LIIFDecoder):
    """Render N x 3 signed RGB for one feature map (F, h, w) at ``grid``."""
    dtype = feat.dtype
    coords = torch.as_tensor(grid.coords, dtype=dtype)[None]
    cells = torch.as_tensor(grid.cells, dtype=dtype)[None]
    hf = None if hf_signal is None else torch.as_tensor(hf_signal, dtype=dtype)
    if hf is not None:
        if hf.dim() == 1:
            hf = hf[None]
        elif hf.shape[0] != len(grid):
            raise ValueError("hf_signal length must match the grid")
        else:
            hf = hf[None]
    return model.query_rgb(feat[None], coords, cells, hf)[0]


def output_size(h: int, w: int, scale: float):
    return int(round(h * scale)), int(round(w * scale))


@torch.no_grad()
def super_resolve(lr: ImageTensor, scale: float, z, model: LIIFDecoder, chunk: int = 30000) -> ImageTensor:
    """Render ``lr`` at ``scale``; output keeps the input's value range.

    ``z`` is a latent vector of size d_z, or None for a zero HF signal.
    """
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    if not scale > 0:
        raise ValueError("scale must be positive")
    out_h, out_w = output_size(lr.height, lr.width, scale)
    if out_h < 1 or out_w < 1:
        raise ValueError("degenerate output size")
    p = next(model.parameters())
    feat = model.extract_features(_image_batch(lr, model))
    if z is None:
        hf = feat.new_zeros(1, model.hf_dim)
    else:
        hf = model.hf_signal(torch.as_tensor(np.asarray(z), dtype=p.dtype).reshape(1, -1))
    grid = make_coord_grid(out_h, out_w)
    coords = torch.as_tensor(grid.coords, dtype=p.dtype)[None]
    cells = torch.as_tensor(grid.cells, dtype=p.dtype)[None]
    n = coords.shape[1]
    out = []
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        out.append(model.query_rgb(feat, coords[:, sl], cells[:, sl], hf))
    rgb = torch.cat(out, dim=1)[0].clamp(-1, 1)
    data = rgb.T.reshape(3, out_h, out_w).double().cpu().numpy()
    return ImageTensor.clamped(data, "signed").to_range(lr.value_range)
