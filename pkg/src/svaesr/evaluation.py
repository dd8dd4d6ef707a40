"""Multi-scale PSNR evaluation, noise protocol and residual images.

Metric conventions (``auto``): datasets whose name contains ``div2k`` are
scored on RGB with no border crop; everything else (Set5, Set14, B100,
Urban100, ...) on BT.601 luma with a border of ``ceil(scale)`` pixels. LR
inputs are quantized to 8 bits, as they would be when stored as PNG, and so
are SR outputs before scoring.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ImageTensor, bicubic_resize, psnr, quantize, rgb_to_y
from .data import DatasetManifest, add_gaussian_noise, make_eval_pair
from .decoder import super_resolve
from .encoder import sample_prior


@dataclass(frozen=True)
class ImageResult:
    image: str
    scale: float
    psnr: float
    seconds: float


@dataclass
class EvalReport:
    dataset: str
    model_id: str
    convention: str
    results: list = field(default_factory=list)

    @property
    def scales(self):
        out = []
        for r in self.results:
            if r.scale not in out:
                out.append(r.scale)
        return out

    def per_image(self, scale):
        return [r for r in self.results if r.scale == scale]

    def mean(self, scale) -> float:
        vals = [r.psnr for r in self.per_image(scale)]
        return math.fsum(vals) / len(vals)

    def summary_lines(self):
        return [f"{self.dataset} x{s:g} {self.mean(s):.2f}" for s in self.scales]

    def table(self) -> str:
        names = [r.image for r in self.per_image(self.scales[0])] if self.results else []
        head = f"{'image':<24}" + "".join(f"{'x' + format(s, 'g'):>10}" for s in self.scales)
        lines = [f"# {self.dataset} / {self.model_id} / {self.convention}", head]
        for name in names:
            row = {r.scale: r.psnr for r in self.results if r.image == name}
            lines.append(f"{name:<24}" + "".join(f"{row[s]:>10.2f}" for s in self.scales))
        lines.append(f"{'mean':<24}" + "".join(f"{self.mean(s):>10.2f}" for s in self.scales))
        return "\n".join(lines)

    def to_records(self) -> str:
        """Tab-separated line records; the stable machine-readable form."""
        lines = [f"report\t{self.dataset}\t{self.model_id}\t{self.convention}"]
        for r in self.results:
            lines.append(f"image\t{r.image}\t{r.scale!r}\t{r.psnr!r}\t{r.seconds!r}")
        for s in self.scales:
            lines.append(f"mean\t{s!r}\t{self.mean(s)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_records(cls, text: str) -> EvalReport:
        report = None
        for line in text.splitlines():
            if not line:
                continue
            kind, *fields = line.split("\t")
            if kind == "report":
                report = cls(*fields)
            elif kind == "image":
                name, scale, value, seconds = fields
                report.results.append(ImageResult(name, float(scale), float(value), float(seconds)))
            elif kind == "mean":
                scale, value = float(fields[0]), float(fields[1])
                if report.mean(scale) != value:
                    raise ValueError(f"record mean for x{scale:g} disagrees with per-image entries")
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        if report is None:
            raise ValueError("no report header")
        return report


def metric_convention(dataset: str, override: str = "auto") -> str:
    if override in ("y", "rgb"):
        return override
    if override != "auto":
        raise ValueError(f"unknown metric convention {override!r}")
    return "rgb" if "div2k" in dataset.lower() else "y"


def score(sr: ImageTensor, hr: ImageTensor, scale: float, convention: str) -> float:
    sr, hr = sr.to_unit(), hr.to_unit()
    if convention == "y":
        return psnr(rgb_to_y(sr), rgb_to_y(hr), border_crop=int(math.ceil(scale)))
    return psnr(sr, hr, border_crop=0)


def residual_image(sr: ImageTensor, hr: ImageTensor, gain: float = 1.0) -> ImageTensor:
    """Mid-gray-centred difference image ``0.5 + gain * (sr - hr)``, clamped."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {sr.shape} vs {hr.shape}")
    if gain <= 0:
        raise ValueError("gain must be positive")
    diff = sr.to_unit().data - hr.to_unit().data
    return ImageTensor.clamped(0.5 + gain * diff, "unit", sr.color_space)


def eval_latent(decoder, seed):
    if seed is None:
        return np.zeros(decoder.d_z)
    return sample_prior(decoder.d_z, int(seed), dtype=torch.float64).numpy()


def evaluate_images(images, scales, decoder=None, dataset="", noise_tau=0.0, seed=None, convention="auto",
                    model_id=None, chunk=30000, noise_scale="8bit", on_image=None, workers=1) -> EvalReport:
    """Score ``images`` (list of (name, unit-range ImageTensor)) at every scale.

    ``decoder`` None means plain bicubic upsampling. ``seed`` None renders
    with the prior mean (z = 0); otherwise z is a seeded prior draw. Images
    may be processed concurrently; results always follow input order.
    """
    scales = [float(s) for s in scales]
    if not scales or any(not s > 0 for s in scales):
        raise ValueError("scales must be non-empty and positive")
    conv = metric_convention(dataset, convention)
    report = EvalReport(dataset, model_id or ("bicubic" if decoder is None else "model"), conv)
    z = None if decoder is None else eval_latent(decoder, seed)

    def run(item):
        idx, (name, hr_full) = item
        rows = []
        for scale in scales:
            t0 = time.perf_counter()
            lr, hr = make_eval_pair(hr_full, scale)
            lr = quantize(lr)
            if noise_tau > 0:
                rng = np.random.default_rng([0 if seed is None else int(seed), idx, int(round(scale * 1000))])
                lr = quantize(add_gaussian_noise(lr, noise_tau, rng, noise_scale))
            if decoder is None:
                sr = bicubic_resize(lr, scale, (hr.height, hr.width))
            else:
                sr = super_resolve(lr, scale, z, decoder, chunk)
            sr = quantize(sr)
            value = score(sr, hr, scale, conv)
            rows.append(ImageResult(name, scale, value, time.perf_counter() - t0))
            if on_image is not None:
                on_image(name, scale, lr, sr, hr)
        return rows

    items = list(enumerate(images))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_image = list(pool.map(run, items))
    else:
        per_image = [run(it) for it in items]
    # scale-major order so per-scale blocks read naturally
    for scale in scales:
        for rows in per_image:
            report.results.extend(r for r in rows if r.scale == scale)
    return report


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def evaluate(checkpoint, manifest: DatasetManifest, scales, noise_tau=0.0, seed=None, method="model",
             convention="auto", chunk=30000, on_image=None, workers=1) -> EvalReport:
    """Evaluate a checkpoint (or bicubic) on every image of ``manifest``."""
    from .trainer import load_checkpoint

    decoder, model_id, noise_scale = None, "bicubic", "8bit"
    if method == "model":
        if checkpoint is None:
            raise ValueError("model evaluation needs a checkpoint")
        state = load_checkpoint(checkpoint)  # fails before any image is touched
        decoder = state.decoder.eval()
        model_id = checkpoint_id(checkpoint)
        noise_scale = state.cfg.data.noise_scale
    elif method != "bicubic":
        raise ValueError(f"unknown method {method!r}")
    manifest.validate()
    images = manifest.load_images()
    return evaluate_images(images, scales, decoder, manifest.name, noise_tau, seed, convention, model_id, chunk,
                           noise_scale, on_image, workers)


def validation_psnr(decoder, images, scales) -> float:
    """Mean RGB PSNR over images and scales (prior-mean latent); used for model selection."""
    named = [(f"val{i}", img) for i, img in enumerate(images)]
    report = evaluate_images(named, scales, decoder, "val", convention="rgb")
    return math.fsum(report.mean(s) for s in report.scales) / len(report.scales)
