"""Image and coordinate primitives shared by the rest of the package."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PSNR_CAP = 99.0

_RANGES = {"unit": (0.0, 1.0), "signed": (-1.0, 1.0)}
_RANGE_TOL = 1e-6

# full-swing BT.601 luma
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImageTensor:
    """A C x H x W float64 image with a declared value range."""

    data: np.ndarray
    value_range: str = "unit"
    color_space: str = "RGB"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"expected C x H x W array, got shape {data.shape}")
        c, h, w = data.shape
        if c not in (1, 3) or h < 1 or w < 1:
            raise ValueError(f"bad image shape {data.shape}")
        if self.value_range not in _RANGES:
            raise ValueError(f"unknown value range {self.value_range!r}")
        if self.color_space not in ("RGB", "Y"):
            raise ValueError(f"unknown color space {self.color_space!r}")
        if (self.color_space == "RGB") != (c == 3):
            raise ValueError(f"{self.color_space} image with {c} channels")
        lo, hi = _RANGES[self.value_range]
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < lo - _RANGE_TOL or data.max() > hi + _RANGE_TOL:
            raise ValueError(
                f"values [{data.min():.4g}, {data.max():.4g}] outside {self.value_range} range"
            )
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def clamped(cls, data, value_range="unit", color_space="RGB"):
        lo, hi = _RANGES[value_range]
        return cls(np.clip(data, lo, hi), value_range, color_space)

    def to_unit(self) -> ImageTensor:
        if self.value_range == "unit":
            return self
        return ImageTensor.clamped((self.data + 1.0) / 2.0, "unit", self.color_space)

    def to_signed(self) -> ImageTensor:
        if self.value_range == "signed":
            return self
        return ImageTensor.clamped(self.data * 2.0 - 1.0, "signed", self.color_space)

    def to_range(self, value_range: str) -> ImageTensor:
        return self.to_unit() if value_range == "unit" else self.to_signed()

    def crop(self, top: int, left: int, height: int, width: int) -> ImageTensor:
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise ValueError("crop window outside image")
        return ImageTensor(
            self.data[:, top:top + height, left:left + width], self.value_range, self.color_space
        )


@dataclass(frozen=True)
class CoordGrid:
    """Normalized query coordinates (N x 2, row then column) and per-query cell sizes."""

    coords: np.ndarray
    cells: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        cells = np.asarray(self.cells, dtype=np.float64).reshape(-1, 2)
        if coords.shape != cells.shape:
            raise ValueError("coords and cells differ in length")
        if np.any(np.abs(coords) > 1.0):
            raise ValueError("coordinates must lie in [-1, 1]")
        if np.any(cells <= 0):
            raise ValueError("cell sizes must be strictly positive")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "cells", cells)

    def __len__(self):
        return self.coords.shape[0]

    def subset(self, idx) -> CoordGrid:
        return CoordGrid(self.coords[idx], self.cells[idx])


def make_coord_grid(h: int, w: int) -> CoordGrid:
    """Pixel-center coordinates of an h x w image in row-major order.

    Row ``i`` sits at ``-1 + (2i + 1) / h`` and every cell is ``(2/h, 2/w)``.
    """
    if int(h) != h or int(w) != w or h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be positive integers, got {h}x{w}")
    h, w = int(h), int(w)
    rows = -1.0 + (2.0 * np.arange(h) + 1.0) / h
    cols = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([rr.ravel(), cc.ravel()], axis=-1)
    cells = np.tile(np.array([2.0 / h, 2.0 / w]), (h * w, 1))
    return CoordGrid(coords, cells)


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_matrix(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) bicubic interpolation matrix.

    Half-pixel-center alignment with symmetric (mirror) edge extension; when
    shrinking, the kernel is stretched by ``1/scale`` to anti-alias.
    """
    if antialias and scale < 1.0:
        support = 4.0 / scale

        def kernel(x):
            return scale * cubic_kernel(scale * x)
    else:
        support = 4.0
        kernel = cubic_kernel

    # 1-based output pixel centers mapped into input space
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - support / 2.0)
    taps = int(math.ceil(support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - idx)
    weights /= weights.sum(axis=1, keepdims=True)

    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    src = mirror[(idx.astype(np.int64) - 1) % (2 * in_len)]
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.ravel()), weights.ravel())
    return mat


def bicubic_resize(img: ImageTensor, scale: float, size: tuple[int, int] | None = None) -> ImageTensor:
    """Resize with the a = -0.5 bicubic kernel; output is clamped to the value range.

    Output dims are ``round(H * scale) x round(W * scale)`` unless ``size`` pins them.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if size is None:
        size = (int(round(img.height * scale)), int(round(img.width * scale)))
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate output size {out_h}x{out_w}")
    mh = resize_matrix(img.height, out_h, scale)
    mw = resize_matrix(img.width, out_w, scale)
    out = np.einsum("oh,chw,pw->cop", mh, img.data, mw, optimize=True)
    return ImageTensor.clamped(out, img.value_range, img.color_space)


def quantize(img: ImageTensor) -> ImageTensor:
    """Snap a unit-range image to the 8-bit grid (what a PNG round trip does)."""
    q = to_uint8(img.to_unit().data)
    out = ImageTensor(q.astype(np.float64) / 255.0, "unit", img.color_space)
    return out.to_range(img.value_range)


def rgb_to_y(img: ImageTensor) -> ImageTensor:
    if img.color_space != "RGB":
        raise ValueError("rgb_to_y expects an RGB image")
    y = np.tensordot(_LUMA, img.data, axes=(0, 0))[None]
    return ImageTensor.clamped(y, img.value_range, "Y")


def psnr(a: ImageTensor, b: ImageTensor, border_crop: int = 0) -> float:
    """PSNR in dB with ``border_crop`` pixels removed from every edge.

    Identical images return ``PSNR_CAP`` instead of infinity.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.value_range != b.value_range:
        raise ValueError("value ranges differ")
    if border_crop < 0:
        raise ValueError("border_crop must be non-negative")
    lo, hi = _RANGES[a.value_range]
    c = border_crop
    da, db = a.data, b.data
    if c:
        if 2 * c >= a.height or 2 * c >= a.width:
            raise ValueError("border crop removes the whole image")
        da, db = da[:, c:-c, c:-c], db[:, c:-c, c:-c]
    # symmetric in (a, b) by construction: squared difference
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10((hi - lo) ** 2 / mse))


def to_uint8(data: np.ndarray) -> np.ndarray:
    # clamp, then round half away from zero (all values are non-negative here)
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> ImageTensor:
    """Read an 8-bit PNG (or any 8-bit PIL format) as a unit-range RGB image."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise OSError(f"{path}: unsupported bit depth (mode {im.mode})")
            if im.mode not in ("RGB", "L", "P", "RGBA", "LA", "1"):
                raise OSError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError:
        raise
    except Exception as exc:  # PIL raises a zoo of types on corrupt files
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return ImageTensor(arr.transpose(2, 0, 1).astype(np.float64) / 255.0, "unit", "RGB")


def save_image(img, path) -> None:
    """Write an 8-bit RGB PNG; raw C x H x W arrays are taken as unit range and clamped."""
    if isinstance(img, ImageTensor):
        data = img.to_unit().data
    else:
        data = np.asarray(img, dtype=np.float64)
    if data.shape[0] == 1:
        data = np.repeat(data, 3, axis=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(data).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
