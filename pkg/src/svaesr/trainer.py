"""Alternating encoder/decoder optimization, checkpointing and the fit loop.

Each ``train_step`` runs two phases on the same batch:

1. decoder frozen -- the encoder is stepped on ``encoder_loss``: real HR
   tokens should get a high ELBO, generated samples a low one;
2. encoder frozen -- decoder and feature extractor are stepped on
   ``decoder_loss`` (plus the composite pixel loss when enabled), with
   freshly generated samples whose gradients flow back into the decoder.

Generated samples are rendered at the HR token coordinates of the batch,
half from posterior latents (reconstructions) and half from prior draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig, from_dict, to_dict
from .data import Batch, BatchStream, DatasetManifest
from .decoder import LIIFDecoder
from .encoder import ConditionalEncoder, make_tokens, sample_indices, sample_prior
from .objectives import decoder_loss, elbo_terms, encoder_loss, total_loss

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


def build_models(cfg: TrainConfig):
    m = cfg.model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        decoder = LIIFDecoder(
            n_feats=m.n_feats,
            n_resblocks=m.n_resblocks,
            posenc=cfg.posenc,
            hidden=m.mlp_hidden,
            d_z=m.d_z,
            hf_dim=m.hf_dim,
            feat_unfold=m.feat_unfold,
            local_ensemble=m.local_ensemble,
            cell_decode=m.cell_decode,
        )
        encoder = ConditionalEncoder(
            posenc=cfg.posenc,
            width=m.enc_width,
            heads=m.enc_heads,
            n_self=m.enc_self_blocks,
            n_cross=m.enc_cross_blocks,
            d_z=m.d_z,
        )
    return encoder, decoder


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_rate, betas=(0.9, 0.999), weight_decay=0.0)


@dataclass
class TrainState:
    cfg: TrainConfig
    encoder: ConditionalEncoder
    decoder: LIIFDecoder
    enc_opt: torch.optim.Optimizer
    dec_opt: torch.optim.Optimizer
    gen: torch.Generator
    iteration: int = 0
    cursor: int = 0
    best_val: float = -math.inf


def init_state(cfg: TrainConfig) -> TrainState:
    encoder, decoder = build_models(cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(cfg, encoder, decoder, _adam(encoder.parameters(), cfg), _adam(decoder.parameters(), cfg), gen)


# -- objectives on a batch ----------------------------------------------------------


@dataclass
class Tokens:
    y: torch.Tensor  # (B, n, D) tokens of the HR image
    coords: torch.Tensor  # (B, n, 2)
    cells: torch.Tensor  # (B, n, 2)
    rgb: torch.Tensor  # (B, n, 3)
    r: torch.Tensor  # (B, m, D) reference tokens


_ref_grid_cache: dict = {}


def _ref_coords(size, dtype):
    key = (size, dtype)
    if key not in _ref_grid_cache:
        r = -1.0 + (2.0 * torch.arange(size, dtype=torch.float64) + 1.0) / size
        rr, cc = torch.meshgrid(r, r, indexing="ij")
        _ref_grid_cache[key] = torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=-1).to(dtype)
    return _ref_grid_cache[key]


def prepare_tokens(batch: Batch, n_tokens: int, posenc, gen) -> Tokens:
    b, q = batch.rgb.shape[:2]
    n = min(n_tokens, q)
    idx = torch.stack([sample_indices(q, n, gen) for _ in range(b)])
    take = idx[..., None]
    rgb = batch.rgb.gather(1, take.expand(-1, -1, 3))
    coords = batch.coords.gather(1, take.expand(-1, -1, 2))
    cells = batch.cells.gather(1, take.expand(-1, -1, 2))

    size = batch.ref.shape[-1]
    ref_rgb = batch.ref.flatten(2).transpose(1, 2)
    m = min(n_tokens, size * size)
    ridx = torch.stack([sample_indices(size * size, m, gen) for _ in range(b)])
    r_rgb = ref_rgb.gather(1, ridx[..., None].expand(-1, -1, 3))
    r_coords = _ref_coords(size, batch.ref.dtype)[ridx]
    return Tokens(make_tokens(rgb, coords, posenc), coords, cells, rgb, make_tokens(r_rgb, r_coords, posenc))


def _mix_latents(z_post, z_prior, k):
    # half the batch reconstructs (posterior z), half generates (prior z)
    b = z_post.shape[0]
    mask = ((torch.arange(b) + k) % 2 == 0)[:, None]
    return torch.where(mask, z_post.detach(), z_prior)


def encoder_objective(encoder, decoder, batch: Batch, tokens: Tokens, gen, cfg: TrainConfig, fakes=None, stats=None):
    """Phase-1 loss. ``fakes`` (list of (B, n, 3)) are treated as constants.

    Returns ``(loss, real_terms, fake_terms, fakes)``.
    """
    ocfg = cfg.objective
    with torch.no_grad():
        feat = decoder.extract_features(batch.lr)
    real = elbo_terms(encoder, decoder, feat, tokens.y, tokens.r, tokens.coords, tokens.cells, tokens.rgb, gen, ocfg)
    priors = [sample_prior(cfg.model.d_z, gen, len(batch), feat.dtype) for _ in range(cfg.fakes_per_real)]
    if fakes is None:
        with torch.no_grad():
            fakes = [
                decoder.query_rgb(feat, tokens.coords, tokens.cells, decoder.hf_signal(_mix_latents(real.z, zp, k)))
                for k, zp in enumerate(priors)
            ]
    fakes = [f.detach() for f in fakes]
    fake_terms = [
        elbo_terms(encoder, decoder, feat, make_tokens(f, tokens.coords, encoder.posenc), tokens.r,
                   tokens.coords, tokens.cells, f, gen, ocfg)
        for f in fakes
    ]
    loss = encoder_loss(real.elbo, [t.elbo for t in fake_terms], ocfg, stats)
    return loss, real, fake_terms, fakes


def decoder_objective(encoder, decoder, batch: Batch, tokens: Tokens, gen, cfg: TrainConfig):
    """Phase-2 loss; returns ``(loss, parts)``."""
    ocfg = cfg.objective
    feat = decoder.extract_features(batch.lr)
    real = elbo_terms(encoder, decoder, feat, tokens.y, tokens.r, tokens.coords, tokens.cells, tokens.rgb, gen, ocfg)
    fake_terms = []
    for k in range(cfg.fakes_per_real):
        zp = sample_prior(cfg.model.d_z, gen, len(batch), feat.dtype)
        fake = decoder.query_rgb(feat, tokens.coords, tokens.cells, decoder.hf_signal(_mix_latents(real.z, zp, k)))
        fake_terms.append(
            elbo_terms(encoder, decoder, feat, make_tokens(fake, tokens.coords, encoder.posenc), tokens.r,
                       tokens.coords, tokens.cells, fake, gen, ocfg)
        )
    loss = decoder_loss(real.elbo, [t.elbo for t in fake_terms], ocfg)
    parts = {"real": real, "fakes": fake_terms}
    # the composite pixel loss is always reported; it only trains when enabled
    with torch.set_grad_enabled(cfg.add_total_loss and torch.is_grad_enabled()):
        pred = decoder.query_rgb(feat, batch.coords, batch.cells, decoder.hf_signal(real.z))
        tl, tparts = total_loss(pred, batch.rgb, real.dist, ocfg)
    parts["total"] = tl
    parts["l1"] = tparts["l1"]
    if cfg.add_total_loss:
        loss = loss + tl
    return loss, parts


# -- one optimization step ------------------------------------------------------------


def _param_norms(module):
    return {name: float(p.detach().norm()) for name, p in module.named_parameters()}


def _abort(state: TrainState, what: str, value):
    norms = {**{f"encoder.{k}": v for k, v in _param_norms(state.encoder).items()},
             **{f"decoder.{k}": v for k, v in _param_norms(state.decoder).items()}}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
    summary = ", ".join(f"{k}={v:.4g}" for k, v in worst)
    raise TrainingAborted(
        f"non-finite {what} ({value}) at iteration {state.iteration}, batch cursor {state.cursor}; "
        f"largest parameter norms: {summary}"
    )


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def _unchanged(module, snap):
    return all(torch.equal(p, s) for p, s in zip(module.parameters(), snap))


def train_step(batch: Batch, state: TrainState) -> dict:
    cfg, enc, dec, gen = state.cfg, state.encoder, state.decoder, state.gen
    stats = {"exp_clamped": 0}
    try:
        tokens = prepare_tokens(batch, cfg.data.n_tokens, cfg.posenc, gen)

        # phase 1: decoder fixed, encoder learns to separate real from generated
        check = cfg.debug_phase_isolation
        dec_snap = _snapshot(dec) if check else None
        enc.requires_grad_(True)
        dec.requires_grad_(False)
        state.enc_opt.zero_grad(set_to_none=True)
        enc_loss, real1, fakes1, _ = encoder_objective(enc, dec, batch, tokens, gen, cfg, stats=stats)
        if not torch.isfinite(enc_loss):
            _abort(state, "encoder loss", float(enc_loss.detach()))
        enc_loss.backward()
        state.enc_opt.step()
        if check and not _unchanged(dec, dec_snap):
            raise AssertionError("encoder phase modified decoder parameters")

        # phase 2: encoder fixed, decoder learns to reconstruct and to fool it
        enc_snap = _snapshot(enc) if check else None
        enc.requires_grad_(False)
        dec.requires_grad_(True)
        state.dec_opt.zero_grad(set_to_none=True)
        dec_loss, parts = decoder_objective(enc, dec, batch, tokens, gen, cfg)
        if not torch.isfinite(dec_loss):
            _abort(state, "decoder loss", float(dec_loss))
        dec_loss.backward()
        state.dec_opt.step()
        if check and not _unchanged(enc, enc_snap):
            raise AssertionError("decoder phase modified encoder parameters")
    except FloatingPointError as exc:
        _abort(state, "latent distribution", exc)
    finally:
        enc.requires_grad_(True)
        dec.requires_grad_(True)

    state.iteration += 1
    return _step_metrics(real1, fakes1, parts["real"], enc_loss, dec_loss, parts, stats)


def _step_metrics(real1, fakes1, real, enc_loss, dec_loss, parts, stats):
    fake_elbo = torch.cat([t.elbo.detach() for t in fakes1]).mean()
    return {
        "real_elbo": float(real1.elbo.detach().mean()),
        "fake_elbo": float(fake_elbo),
        "enc_loss": float(enc_loss.detach()),
        "dec_loss": float(dec_loss.detach()),
        "l1": float(parts["l1"].detach()),
        "kl": float(real.kl.detach().mean()),
        "fake_kl": float(torch.cat([t.kl.detach() for t in fakes1]).mean()),
        "total": float(parts["total"].detach()),
        "exp_clamped": float(stats["exp_clamped"]),
    }


# -- checkpoints --------------------------------------------------------------------


def _opt_state(opt):
    sd = opt.state_dict()
    return {"state": {str(k): v for k, v in sd["state"].items()}, "param_groups": sd["param_groups"]}


def _restore_opt(opt, saved):
    state = {int(k): v for k, v in saved["state"].items()}
    groups = []
    for g in saved["param_groups"]:
        g = dict(g)
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(state: TrainState, path) -> None:
    ckpt_io.save(
        {
            "config": to_dict(state.cfg),
            "iteration": state.iteration,
            "cursor": state.cursor,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "encoder": state.encoder.state_dict(),
            "decoder": state.decoder.state_dict(),
            "enc_opt": _opt_state(state.enc_opt),
            "dec_opt": _opt_state(state.dec_opt),
            "rng": state.gen.get_state(),
        },
        path,
    )


def load_checkpoint(path) -> TrainState:
    payload = ckpt_io.load(path)
    try:
        cfg = from_dict(payload["config"])
        state = init_state(cfg)
        state.encoder.load_state_dict(payload["encoder"])
        state.decoder.load_state_dict(payload["decoder"])
        _restore_opt(state.enc_opt, payload["enc_opt"])
        _restore_opt(state.dec_opt, payload["dec_opt"])
    except (KeyError, RuntimeError, ValueError) as exc:
        raise ckpt_io.CheckpointError(f"{path}: checkpoint does not match its stored config: {exc}") from exc
    state.gen.set_state(payload["rng"])
    state.iteration = int(payload["iteration"])
    state.cursor = int(payload["cursor"])
    best = payload.get("best_val")
    state.best_val = -math.inf if best is None else float(best)
    return state


# -- metrics log --------------------------------------------------------------------


class MetricsLog:
    """Append-only ``iter,name,value`` records; values use ``repr`` so they parse back exactly."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, iteration: int, metrics: dict):
        with open(self.path, "a") as fh:
            for name, value in metrics.items():
                fh.write(f"{iteration},{name},{float(value)!r}\n")


def read_metrics(path):
    out = []
    for line in Path(path).read_text().splitlines():
        if line:
            it, name, value = line.split(",")
            out.append((int(it), name, float(value)))
    return out


# -- fit ----------------------------------------------------------------------------


def fit(cfg: TrainConfig, train_manifest: DatasetManifest, out_dir, val_manifest=None, ref_manifest=None,
        resume=None, stop_at=None, images=None, references=None, val_images=None, progress=None) -> TrainState:
    """Run (or resume) training; returns the final state.

    Checkpoints go to ``out_dir/last.ckpt`` every ``checkpoint_every`` steps
    (plus ``iter_XXXXXXX.ckpt`` snapshots) and the best validation model to
    ``out_dir/best.ckpt``. ``images``/``references``/``val_images`` accept
    preloaded ImageTensor lists instead of manifests.
    """
    from .evaluation import validation_psnr

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if images is None:
        train_manifest.validate()
        images = [img for _, img in train_manifest.load_images()]
    if references is None:
        references = [img for _, img in ref_manifest.load_images()] if ref_manifest is not None else []
    if val_images is None and val_manifest is not None:
        val_images = [img for _, img in val_manifest.load_images()]

    state = load_checkpoint(resume) if resume else init_state(cfg)
    cfg = state.cfg
    stream = BatchStream(images, cfg.data, cfg.seed, cfg.batch_size, references, cursor=state.cursor)
    metrics_log = MetricsLog(out_dir / "metrics.csv")
    stop = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    while state.iteration < stop:
        batch = stream.next_batch()
        state.cursor = stream.cursor
        metrics = train_step(batch, state)
        metrics_log.write(state.iteration, metrics)
        if progress is not None:
            progress(state.iteration, metrics)
        if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.total_iters:
            if val_images:
                val = validation_psnr(state.decoder, val_images, cfg.val_scales)
                metrics_log.write(state.iteration, {"val_psnr": val})
                if val > state.best_val:
                    state.best_val = val
                    save_checkpoint(state, out_dir / "best.ckpt")
            save_checkpoint(state, out_dir / f"iter_{state.iteration:07d}.ckpt")
            save_checkpoint(state, out_dir / "last.ckpt")
            log.info("iteration %d checkpointed", state.iteration)
    return state
