"""Central finite-difference checks for module parameters (double precision)."""

from __future__ import annotations

import numpy as np
import torch

from svaesr.config import preset
from svaesr.core import ImageTensor
from svaesr.data import BatchStream
from svaesr.trainer import build_models, decoder_objective, encoder_objective, prepare_tokens


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def param_grad_error(loss_fn, modules, per_tensor=6, h=1e-6, seed=0):
    """Max relative error between autograd and central differences.

    ``loss_fn()`` must rebuild the scalar loss from scratch (all randomness
    frozen). ``per_tensor`` entries of every parameter tensor are probed.
    """
    params = [(name, p) for m in modules for name, p in m.named_parameters()]
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    grads = {id(p): p.grad.detach().clone() for _, p in params}

    gen = torch.Generator().manual_seed(seed)
    worst, where = 0.0, None
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            k = min(per_tensor, flat.numel())
            for i in torch.randperm(flat.numel(), generator=gen)[:k].tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = relative_error(grads[id(p)].view(-1)[i].item(), numeric)
                if err > worst:
                    worst, where = err, f"{name}[{i}]"
    return worst, where


def toy_pipeline(seed=0, batch_size=2):
    """Toy-preset models in double precision plus one small frozen batch."""
    cfg = preset("toy", seed=seed, data={"n_queries": 64})
    enc, dec = build_models(cfg)
    enc.double()
    dec.double()
    img = ImageTensor(np.random.default_rng(seed).random((3, 60, 60)))
    batch = BatchStream([img], cfg.data, seed, batch_size).next_batch(torch.float64)
    tokens = prepare_tokens(batch, cfg.data.n_tokens, cfg.posenc, torch.Generator().manual_seed(seed))
    return cfg, enc, dec, batch, tokens


def pipeline_grad_errors(per_tensor=4, seed=0):
    """Finite-difference check of both adversarial losses, end to end, frozen rng."""
    cfg, enc, dec, batch, tokens = toy_pipeline(seed)

    def gen():
        return torch.Generator().manual_seed(seed + 100)

    # generated samples are constants in the encoder phase; fix them once
    _, _, _, fakes = encoder_objective(enc, dec, batch, tokens, gen(), cfg)
    enc_err = param_grad_error(lambda: encoder_objective(enc, dec, batch, tokens, gen(), cfg, fakes=fakes)[0],
                               [enc], per_tensor, seed=seed)
    dec_err = param_grad_error(lambda: decoder_objective(enc, dec, batch, tokens, gen(), cfg)[0],
                               [dec], per_tensor, seed=seed)
    return {"encoder_loss": enc_err, "decoder_loss": dec_err}
