"""Command-line entry points.

Heavy imports happen inside main() so that --deterministic can pin the
BLAS/numba thread pools through environment variables before numpy loads;
with a fixed seed that makes two runs of the same command byte-identical.

Exit codes: 0 success, 1 user error (bad flags, bad config, unreadable or
corrupt files), 2 unexpected internal failure.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; here that is a user error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="pin all thread pools to one thread for bit-reproducible runs")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = _Parser(prog="scalesr",
                     description="Next-scale autoregressive super-resolution, CPU-only.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("corpus", parents=[common],
                       help="render the procedural image corpus and its manifests")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", type=int, default=2000, help="total images to render")
    p.add_argument("--hr-size", type=int, default=64, help="square target resolution")
    p.add_argument("--val-count", type=int, default=32, help="held-out validation images")
    p.add_argument("--neg-fraction", type=float, default=0.15,
                   help="fraction of train rows flagged as low quality")
    p.add_argument("--seed", type=int, default=0)

    def train_parser(name: str, help_text: str):
        q = sub.add_parser(name, parents=[common], help=help_text)
        q.add_argument("--data", required=True, help="train manifest (TSV)")
        q.add_argument("--out", required=True, help="checkpoint to write")
        q.add_argument("--config", help="JSON file overriding run-config defaults")
        q.add_argument("--seed", type=int, help="override the config seed")
        q.add_argument("--resume", help="checkpoint of the same stage to continue from")
        return q

    train_parser("tokenizer-train", "stage 1: autoencoder + multi-scale codebook")
    q = train_parser("pretrain", "stage 2: class-conditional next-scale transformer")
    q.add_argument("--tokenizer", required=True, help="stage-1 checkpoint")
    q = train_parser("finetune", "stage 3: LR-conditioned transformer + residual refiner")
    q.add_argument("--pretrained", required=True, help="stage-2 checkpoint")

    p = sub.add_parser("sr", parents=[common], help="super-resolve low-resolution PNGs")
    p.add_argument("inputs", nargs="+", help="low-resolution input images")
    p.add_argument("--checkpoint", required=True, help="stage-3 checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, help="guidance strength (default: from config)")
    p.add_argument("--greedy", action="store_true", help="argmax tokens instead of sampling")
    p.add_argument("--refine-steps", type=int, help="residual refinement steps")

    p = sub.add_parser("eval", parents=[common],
                       help="super-resolve a validation split and score against bicubic")
    p.add_argument("--checkpoint", required=True, help="stage-3 checkpoint")
    p.add_argument("--data", required=True, help="validation manifest (TSV)")
    p.add_argument("--out", required=True, help="per-image CSV to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, help="guidance strength (default: from config)")
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("bench", parents=[common],
                       help="print sequence/attention/parameter accounting as JSON")
    p.add_argument("--config", help="JSON file overriding run-config defaults")
    return parser


def _load_config(args):
    from .pipeline import RunConfig
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_corpus(args) -> int:
    from .data import build_corpus
    train, val = build_corpus(args.out, args.images, args.hr_size, args.seed,
                              args.val_count, neg_fraction=args.neg_fraction)
    print(train)
    print(val)
    return 0


def _cmd_train_tokenizer(args) -> int:
    from .pipeline import stage_tokenizer
    stage_tokenizer(_load_config(args), args.data, args.out,
                    resume=args.resume, quiet=args.quiet)
    print(args.out)
    return 0


def _cmd_pretrain(args) -> int:
    from .pipeline import stage_pretrain
    stage_pretrain(_load_config(args), args.data, args.tokenizer, args.out,
                   resume=args.resume, quiet=args.quiet)
    print(args.out)
    return 0


def _cmd_finetune(args) -> int:
    from .pipeline import stage_finetune
    stage_finetune(_load_config(args), args.data, args.pretrained, args.out,
                   resume=args.resume, quiet=args.quiet)
    print(args.out)
    return 0


def _cmd_sr(args) -> int:
    import numpy as np

    from .data import read_image, write_png
    from .pipeline import load_bundle, super_resolve
    bundle = load_bundle(args.checkpoint)
    cfg = bundle.cfg
    side = cfg.hr_size // cfg.sr_factor
    images = []
    for path in args.inputs:
        img = read_image(path)
        if img.shape != (side, side, 3):
            raise ValueError(f"{path}: expected a {side}x{side} RGB image for this "
                             f"checkpoint, got {img.shape[1]}x{img.shape[0]}")
        images.append(img.astype(np.float32))
    os.makedirs(args.out, exist_ok=True)
    sr = super_resolve(bundle, np.stack(images), args.seed,
                       cfg_scale=args.cfg_scale, greedy=args.greedy,
                       refine_steps=args.refine_steps)
    for path, out_img in zip(args.inputs, sr):
        stem = os.path.splitext(os.path.basename(path))[0]
        dest = os.path.join(args.out, f"{stem}_sr.png")
        write_png(dest, np.clip(out_img.astype(np.float64), 0.0, 1.0))
        print(dest)
    return 0


def _cmd_eval(args) -> int:
    from .pipeline import evaluate, load_bundle
    bundle = load_bundle(args.checkpoint)
    res = evaluate(bundle, args.data, args.out, args.seed,
                   cfg_scale=args.cfg_scale, greedy=args.greedy, quiet=args.quiet)
    agg = res["aggregate"]
    print(f"psnr {agg['psnr']:.4f} (bicubic {agg['psnr_bicubic']:.4f}, "
          f"delta {agg['psnr_delta']:+.4f})")
    print(f"ssim {agg['ssim']:.5f} (bicubic {agg['ssim_bicubic']:.5f}, "
          f"delta {agg['ssim_delta']:+.5f})")
    return 0


def _cmd_bench(args) -> int:
    import json

    from .pipeline import bench
    print(json.dumps(bench(_load_config(args)), indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "corpus": _cmd_corpus,
    "tokenizer-train": _cmd_train_tokenizer,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "sr": _cmd_sr,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.deterministic:
        for var in _THREAD_VARS:  # must precede the numpy/numba imports below
            os.environ[var] = "1"
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        from .pipeline import CheckpointError, ConfigError
        if isinstance(exc, (ConfigError, CheckpointError, OSError, ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
