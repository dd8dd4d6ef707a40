"""Small offline image corpus for toy-scale training checks.

Crops come from the sample images bundled with scikit-image, so no download
is needed. Train and held-out crops are taken from disjoint source images.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import skimage.data as skdata
from PIL import Image

TRAIN_SOURCES = [
    ("astronaut", 3),
    ("coffee", 3),
    ("rocket", 3),
    ("immunohistochemistry", 2),
    ("hubble_deep_field", 2),
    ("retina", 1),
    ("text", 1),
    ("grass", 1),
]
HELDOUT_SOURCES = [("chelsea", 1), ("camera", 1), ("coins", 1), ("brick", 1)]
CROP = 96


def _rgb(name):
    img = getattr(skdata, name)()
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return img[..., :3]


def _textured_crops(img, n, size, rng):
    """``n`` crops preferring busy regions (most of the bundled images have flat borders)."""
    h, w = img.shape[:2]
    out = []
    while len(out) < n:
        cands = []
        for _ in range(16):
            top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
            crop = img[top:top + size, left:left + size]
            cands.append((float(crop.astype(np.float64).std()), top, left))
        _, top, left = max(cands)
        out.append(img[top:top + size, left:left + size])
    return out


def _write(sources, directory: Path, seed: int):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, count in sources:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        for i, crop in enumerate(_textured_crops(_rgb(name), count, CROP, rng)):
            p = directory / f"{name}_{i}.png"
            Image.fromarray(np.ascontiguousarray(crop)).save(p)
            paths.append(p)
    return paths


def build(root, seed=0):
    """Write the 16 train / 4 held-out crops under ``root``; returns (train, heldout) path lists."""
    root = Path(root)
    train = _write(TRAIN_SOURCES, root / "train", seed)
    heldout = _write(HELDOUT_SOURCES, root / "heldout", seed + 1)
    assert len(train) == 16 and len(heldout) == 4
    return train, heldout


def single_image(path, size=64, seed=0):
    """One ``size`` x ``size`` crop for the overfit check."""
    rng = np.random.default_rng(seed)
    crop = _textured_crops(_rgb("astronaut"), 1, size, rng)[0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(crop)).save(path)
    return Path(path)
