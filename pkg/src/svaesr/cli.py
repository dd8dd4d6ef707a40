"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every line written
to stdout is ``key value ...`` shaped so it can be split on whitespace.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .core import load_image, quantize, save_image
from .data import IMAGE_SUFFIXES, DatasetManifest, make_eval_pair
from .decoder import super_resolve
from .evaluation import evaluate, eval_latent, residual_image

log = logging.getLogger("svaesr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _scales(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}")
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("scales must be positive")
    return vals


def _positive(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    p = _Parser(prog="svaesr", description="Arbitrary-scale super-resolution: train, evaluate, apply.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train or resume a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--ref", required=True, help="reference-image manifest")
    t.add_argument("--resume")
    t.add_argument("--val", help="validation manifest for best-model selection")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--stop-at", type=int, help="stop early at this iteration")
    t.add_argument("--log-every", type=int, default=100)

    e = sub.add_parser("eval", help="multi-scale PSNR sweep")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--method", choices=["bicubic"])
    e.add_argument("--data", required=True, help="manifest file or image directory")
    e.add_argument("--scales", type=_scales, default=[2.0, 3.0, 4.0, 6.0, 8.0])
    e.add_argument("--noise", type=float, default=0.0, help="Gaussian noise level on the 0-255 scale")
    e.add_argument("--seed", type=int, help="sample z from the prior with this seed (default: z = 0)")
    conv = e.add_mutually_exclusive_group()
    conv.add_argument("--y-psnr", dest="convention", action="store_const", const="y")
    conv.add_argument("--rgb-psnr", dest="convention", action="store_const", const="rgb")
    e.add_argument("--report", help="write line records here")
    e.add_argument("--table", action="store_true", help="also print the per-image table to stderr")
    e.add_argument("--residual-dir", help="save SR/HR residual images here")
    e.add_argument("--gain", type=_positive, default=4.0)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(convention="auto")

    s = sub.add_parser("sr", help="super-resolve one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--scale", type=_positive, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    m = sub.add_parser("make-lr", help="bicubic-downsample a directory of images")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--scale", type=_positive, required=True)
    m.add_argument("--out", required=True)

    r = sub.add_parser("residual", help="residual image between two images")
    r.add_argument("--a", required=True)
    r.add_argument("--b", required=True)
    r.add_argument("--gain", type=_positive, default=1.0)
    r.add_argument("--out", required=True)

    mf = sub.add_parser("manifest", help="build a manifest from a directory")
    mf.add_argument("--dir", required=True)
    mf.add_argument("--out", required=True)
    mf.add_argument("--name")
    mf.add_argument("--role", choices=["train", "eval"], default="eval")
    return p


def _manifest(path):
    path = Path(path)
    if path.is_dir():
        return DatasetManifest.from_dir(path)
    return DatasetManifest.read(path)


def cmd_train(args):
    from .trainer import fit

    cfg = load_config(args.config)
    train = _manifest(args.data)
    refs = _manifest(args.ref)
    val = _manifest(args.val) if args.val else None

    def progress(it, metrics):
        if it % args.log_every == 0:
            print(f"iter {it} " + " ".join(f"{k} {v:.6g}" for k, v in metrics.items()), flush=True)

    state = fit(cfg, train, args.out, val_manifest=val, ref_manifest=refs, resume=args.resume,
                stop_at=args.stop_at, progress=progress)
    print(f"done {state.iteration} {Path(args.out) / 'last.ckpt'}")


def cmd_eval(args):
    on_image = None
    if args.residual_dir:
        out = Path(args.residual_dir)
        out.mkdir(parents=True, exist_ok=True)

        def on_image(name, scale, lr, sr, hr):
            save_image(residual_image(sr, hr, args.gain), out / f"{Path(name).stem}_x{scale:g}.png")

    method = "bicubic" if args.method else "model"
    report = evaluate(args.ckpt, _manifest(args.data), args.scales, args.noise, args.seed, method,
                      args.convention, on_image=on_image, workers=args.workers)
    for line in report.summary_lines():
        print(line)
    if args.table:
        print(report.table(), file=sys.stderr)
    if args.report:
        Path(args.report).write_text(report.to_records())


def cmd_sr(args):
    from .trainer import load_checkpoint

    decoder = load_checkpoint(args.ckpt).decoder.eval()
    lr = load_image(args.inp)
    z = eval_latent(decoder, args.seed)
    sr = super_resolve(lr, args.scale, z, decoder)
    save_image(sr, args.out)
    print(f"{args.out} {sr.height} {sr.width}")


def cmd_make_lr(args):
    src, dst = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise NotADirectoryError(f"{src} is not a directory")
    dst.mkdir(parents=True, exist_ok=True)
    for p in sorted(q for q in src.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES):
        lr, _ = make_eval_pair(load_image(p), args.scale)
        target = dst / (p.stem + ".png")
        save_image(quantize(lr), target)
        print(f"{target} {lr.height} {lr.width}")


def cmd_residual(args):
    a, b = load_image(args.a), load_image(args.b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    save_image(residual_image(a, b, args.gain), args.out)
    print(args.out)


def cmd_manifest(args):
    m = DatasetManifest.from_dir(args.dir, name=args.name, role=args.role)
    m.validate()
    m.write(args.out)
    print(f"{args.out} {len(m.image_paths)}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sr": cmd_sr,
    "make-lr": cmd_make_lr,
    "residual": cmd_residual,
    "manifest": cmd_manifest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
