"""Datasets, training-pair sampling and degradation synthesis.

Training pairs follow the LIIF-style protocol: draw a scale ``s ~ U(lo, hi)``,
crop an HR patch of side ``round(48 s)``, bicubic-downsample it to 48 x 48 and
keep ``48^2`` HR pixels (sampled without replacement) as coordinate/RGB
supervision. Every sample position in the infinite stream owns a random
generator seeded from ``(seed, epoch, position)``, so batches do not depend
on prefetch concurrency and the stream can resume from a cursor.

Evaluation pairs crop the HR image so the LR/HR sizes round-trip exactly:
for an integral scale ``k`` both sides are cut down to a multiple of ``k``;
for a fractional scale ``s`` each side is cut to the largest ``n`` with
``round(round(n / s) * s) == n``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import DataConfig
from .core import CoordGrid, ImageTensor, bicubic_resize, load_image, make_coord_grid

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass
class DatasetManifest:
    name: str
    image_paths: list
    role: str = "train"
    reference_paths: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ("train", "eval"):
            raise ValueError(f"manifest role must be train or eval, got {self.role!r}")
        self.image_paths = [Path(p) for p in self.image_paths]
        self.reference_paths = [Path(p) for p in self.reference_paths]

    @classmethod
    def from_dir(cls, directory, name=None, role="eval"):
        directory = Path(directory)
        paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return cls(name or directory.name, paths, role)

    @classmethod
    def read(cls, path):
        """Parse ``key=value`` header lines followed by one image path per line.

        Relative paths resolve against the manifest's directory. Recognized
        keys: ``name``, ``role`` and (repeatable) ``ref``.
        """
        path = Path(path)
        meta, refs, images = {}, [], []
        in_header = True
        for raw in path.read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if in_header and sep and key in ("name", "role", "ref"):
                if key == "ref":
                    refs.append(value)
                else:
                    meta[key] = value
                continue
            in_header = False
            images.append(line)

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else (path.parent / p)

        return cls(meta.get("name", path.stem), [resolve(p) for p in images],
                   meta.get("role", "train"), [resolve(p) for p in refs])

    def write(self, path):
        lines = [f"name={self.name}", f"role={self.role}"]
        lines += [f"ref={p}" for p in self.reference_paths]
        lines += [str(p) for p in self.image_paths]
        Path(path).write_text("\n".join(lines) + "\n")

    def validate(self):
        missing = [p for p in self.image_paths + self.reference_paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"manifest {self.name}: missing {missing[0]}"
                                    + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
        if not self.image_paths:
            raise ValueError(f"manifest {self.name} lists no images")

    def load_images(self):
        """Load every image, skipping unreadable ones with a warning."""
        return _load_all(self.image_paths)

    def load_references(self):
        return _load_all(self.reference_paths)


def _load_all(paths):
    out = []
    for p in paths:
        try:
            out.append((p.name, load_image(p)))
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
    return out


@dataclass
class TrainSample:
    lr_patch: ImageTensor
    scale: float
    coords: CoordGrid
    rgb_targets: np.ndarray  # (n, 3), signed range
    reference: ImageTensor
    source: int = -1


def random_crop(img: ImageTensor, size: int, rng) -> ImageTensor:
    if img.height < size or img.width < size:
        factor = size / min(img.height, img.width)
        img = bicubic_resize(img, factor, (max(size, round(img.height * factor)), max(size, round(img.width * factor))))
    top = int(rng.integers(0, img.height - size + 1))
    left = int(rng.integers(0, img.width - size + 1))
    return img.crop(top, left, size, size)


def _augment(img: ImageTensor, rng) -> ImageTensor:
    d = img.data
    if rng.random() < 0.5:
        d = d[:, :, ::-1]
    if rng.random() < 0.5:
        d = d[:, ::-1, :]
    if rng.random() < 0.5:
        d = d.transpose(0, 2, 1)
    return ImageTensor(np.ascontiguousarray(d), img.value_range, img.color_space)


def sample_training_pair(hr_image: ImageTensor, cfg: DataConfig, rng, references=None) -> TrainSample | None:
    """Draw one random-scale LR/HR training pair; None if the image is too small.

    ``references`` is a list of ImageTensors; without one the HR image doubles
    as its own reference.
    """
    lo, hi = cfg.scale_range
    p = cfg.lr_patch
    limit = min(hr_image.height, hr_image.width)
    for _ in range(1 + cfg.max_redraws):
        scale = float(rng.uniform(lo, hi))
        side = int(round(p * scale))
        if side <= limit:
            break
    else:
        log.info("image %dx%d too small for drawn scales; skipped", hr_image.height, hr_image.width)
        return None
    top = int(rng.integers(0, hr_image.height - side + 1))
    left = int(rng.integers(0, hr_image.width - side + 1))
    hr_patch = hr_image.crop(top, left, side, side)
    if cfg.augment:
        hr_patch = _augment(hr_patch, rng)
    lr_patch = bicubic_resize(hr_patch, 1.0 / scale, (p, p))

    grid = make_coord_grid(side, side)
    n = min(cfg.n_queries, side * side)
    idx = np.sort(rng.choice(side * side, size=n, replace=False))
    rgb = hr_patch.to_signed().data.reshape(3, -1).T[idx]

    pool = references if references else [hr_image]
    ref = pool[int(rng.integers(0, len(pool)))]
    ref = random_crop(ref, cfg.ref_patch, rng)
    return TrainSample(lr_patch, scale, grid.subset(idx), rgb, ref)


def add_gaussian_noise(img: ImageTensor, tau: float, rng, noise_scale: str = "8bit") -> ImageTensor:
    """Add i.i.d. N(0, sigma^2) noise and clamp; ``tau`` is on the 0-255 scale by default."""
    if tau < 0:
        raise ValueError("noise level must be non-negative")
    if img.value_range != "unit":
        raise ValueError("noise is defined on unit-range images")
    if tau == 0:
        return img
    sigma = tau / 255.0 if noise_scale == "8bit" else tau
    noisy = img.data + rng.normal(0.0, sigma, size=img.data.shape)
    return ImageTensor.clamped(noisy, "unit", img.color_space)


def _round_trip_len(n: int, scale: float) -> int:
    for m in range(n, 0, -1):
        lo = int(round(m / scale))
        if lo >= 1 and int(round(lo * scale)) == m:
            return m
    return 0


def make_eval_pair(hr_image: ImageTensor, scale: float):
    """Crop ``hr_image`` for an exact size round trip and bicubic-downsample it."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    h, w = hr_image.height, hr_image.width
    if float(scale).is_integer():
        k = int(scale)
        hh, ww = h - h % k, w - w % k
        lh, lw = hh // k, ww // k
    else:
        hh, ww = _round_trip_len(h, scale), _round_trip_len(w, scale)
        lh, lw = int(round(hh / scale)), int(round(ww / scale))
    if min(hh, ww, lh, lw) < 1:
        raise ValueError(f"image {h}x{w} too small for scale {scale}")
    hr = hr_image.crop(0, 0, hh, ww)
    lr = bicubic_resize(hr, 1.0 / scale, (lh, lw))
    return lr, hr


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    lr: torch.Tensor  # (B, 3, p, p) signed
    coords: torch.Tensor  # (B, Q, 2)
    cells: torch.Tensor  # (B, Q, 2)
    rgb: torch.Tensor  # (B, Q, 3) signed
    ref: torch.Tensor  # (B, 3, r, r) signed
    scales: torch.Tensor  # (B,)
    sources: list

    def __len__(self):
        return self.lr.shape[0]

    def to(self, dtype):
        return Batch(self.lr.to(dtype), self.coords.to(dtype), self.cells.to(dtype), self.rgb.to(dtype),
                     self.ref.to(dtype), self.scales, self.sources)


def collate(samples, dtype=torch.float32) -> Batch:
    def t(x):
        return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)

    return Batch(
        lr=t(np.stack([s.lr_patch.to_signed().data for s in samples])),
        coords=t(np.stack([s.coords.coords for s in samples])),
        cells=t(np.stack([s.coords.cells for s in samples])),
        rgb=t(np.stack([s.rgb_targets for s in samples])),
        ref=t(np.stack([s.reference.to_signed().data for s in samples])),
        scales=torch.tensor([s.scale for s in samples], dtype=torch.float64),
        sources=[s.source for s in samples],
    )


class BatchStream:
    """Infinite stream of shuffled training batches.

    ``cursor`` counts sample positions consumed so far (across epochs); it is
    the only state needed to resume the stream.
    """

    def __init__(self, images, cfg: DataConfig, seed: int, batch_size: int, references=None, cursor: int = 0, workers: int = 0):
        if not images:
            raise ValueError("empty training set")
        self.images = list(images)
        self.references = list(references or [])
        self.cfg = cfg
        self.seed = int(seed)
        self.batch_size = int(batch_size)
        self.cursor = int(cursor)
        self.workers = workers
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            rng = np.random.default_rng([self.seed, 0x5EED, epoch])
            self._perms = {epoch: rng.permutation(len(self.images))}
        return self._perms[epoch]

    def sample_at(self, position: int) -> TrainSample | None:
        n = len(self.images)
        epoch, slot = divmod(position, n)
        src = int(self._perm(epoch)[slot])
        rng = np.random.default_rng([self.seed, epoch, slot])
        s = sample_training_pair(self.images[src], self.cfg, rng, self.references)
        if s is not None:
            s.source = src
        return s

    def next_samples(self):
        out, misses = [], 0
        while len(out) < self.batch_size:
            want = self.batch_size - len(out)
            positions = range(self.cursor, self.cursor + want)
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    got = list(pool.map(self.sample_at, positions))
            else:
                got = [self.sample_at(p) for p in positions]
            self.cursor += want
            for s in got:
                if s is None:
                    misses += 1
                else:
                    out.append(s)
            if misses > len(self.images) and not out:
                raise ValueError("no image in the training set is large enough for the patch size")
        return out

    def next_batch(self, dtype=torch.float32) -> Batch:
        return collate(self.next_samples(), dtype)

    def __iter__(self):
        while True:
            yield self.next_batch()


def iterate_batches(images, cfg: DataConfig, seed: int, batch_size: int, references=None, cursor: int = 0, workers: int = 0):
    return iter(BatchStream(images, cfg, seed, batch_size, references, cursor, workers))

