"""Command-line entry points.

Subcommands: train, denoise, eval, synth, gradcheck, ablate, bench.
Exit codes: 0 success, 1 usage error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench as bench_mod
from .ablation import format_table, run_ablation, tsv_rows
from .checkpoint import load_checkpoint, save_checkpoint
from .data import NoiseSpec, add_awgn, load_image, load_image_channels, save_image
from .inference import denoise_array, evaluate_dataset
from .model import ModelConfig
from .training import (
    TrainConfig,
    TrainingDiverged,
    fit,
    run_grad_check_suite,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _widths(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}")


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")


def _float_list(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}")


def _add_model_flags(p):
    p.add_argument("--stages", type=int, default=2, help="stage count")
    p.add_argument("--no-fusion", action="store_true",
                   help="ablated variant: drop the fusion blocks")
    color = p.add_mutually_exclusive_group()
    color.add_argument("--gray", dest="color", action="store_false",
                       help="1-channel model (default)")
    color.add_argument("--color", dest="color", action="store_true",
                       help="3-channel model")
    p.set_defaults(color=False)
    p.add_argument("--widths", type=_widths, default=None,
                   help="comma-separated hidden widths of the branch stacks")
    p.add_argument("--fusion-width", type=int, default=None,
                   help="feature width inside fusion blocks")
    p.add_argument("--dropout-elem", type=float, default=0.05,
                   help="elementwise dropout rate in fusion stacks")
    p.add_argument("--dropout-chan", type=float, default=0.05,
                   help="channelwise dropout rate in fusion stacks")


def _model_config(args):
    kw = dict(
        stages=args.stages,
        image_channels=3 if args.color else 1,
        fusion_enabled=not args.no_fusion,
        fusion_dropout_elem=args.dropout_elem,
        fusion_dropout_chan=args.dropout_chan,
    )
    if args.widths is not None:
        kw["branch_widths"] = args.widths
    if args.fusion_width is not None:
        kw["fusion_width"] = args.fusion_width
    return ModelConfig(**kw)


def _add_train_flags(p):
    p.add_argument("--sigma", type=float, default=25.0,
                   help="noise standard deviation in pixel units")
    p.add_argument("--no-clip", action="store_true",
                   help="do not clamp synthesized noisy pixels to [0, 255]")
    p.add_argument("--patch", type=int, default=180, help="crop size")
    p.add_argument("--batch", type=int, default=6, help="batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--lr-drop-step", type=int, default=300_000,
                   help="step at which the rate is divided by 10")
    p.add_argument("--steps", type=int, default=1000, help="training steps")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="noise-branch loss weight")
    p.add_argument("--beta", type=float, default=0.01,
                   help="mean-absolute loss weight")
    p.add_argument("--blur-prob", type=float, default=0.2,
                   help="probability of the blur augmentation")
    p.add_argument("--no-flip", action="store_true",
                   help="disable flip augmentation")


def _train_config(args):
    return TrainConfig(
        alpha=args.alpha,
        beta=args.beta,
        base_lr=args.lr,
        lr_drop_step=args.lr_drop_step,
        batch_size=args.batch,
        patch=args.patch,
        total_steps=args.steps,
        seed=args.seed,
        flip_enabled=not args.no_flip,
        blur_prob=args.blur_prob,
    )


def build_parser():
    parser = _Parser(prog="nfcnn",
                     description="Two-branch multi-stage image denoiser")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of images")
    p.add_argument("--data", required=True, help="training image directory")
    p.add_argument("--out", default="model.nfck", help="checkpoint path")
    p.add_argument("--log", default="train.log", help="step log path")
    p.add_argument("--ckpt-every", type=int, default=0,
                   help="also write the checkpoint every N steps")
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("denoise", help="denoise one image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", help="PSNR evaluation over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--quantized", action="store_true",
                   help="measure after 8-bit quantization")

    p = sub.add_parser("synth", help="write a noisy copy of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma", type=float, required=True)
    clip = p.add_mutually_exclusive_group()
    clip.add_argument("--clip", dest="clip", action="store_true",
                      help="clamp noisy values to [0, 255] (default)")
    clip.add_argument("--no-clip", dest="clip", action="store_false")
    p.set_defaults(clip=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--self-test", action="store_true",
                   help="inject a deliberately wrong gradient; the suite "
                        "must flag it and exit nonzero")

    p = sub.add_parser("ablate", help="fusion on/off comparison grid")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None,
                   help="evaluation directory (default: --data)")
    p.add_argument("--stages-list", type=_int_list, default=(2, 3, 4))
    p.add_argument("--sigmas", type=_float_list, default=(15.0, 25.0, 50.0, 75.0))
    _add_train_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("bench", help="kernel benchmark: numba vs numpy")
    p.add_argument("--repeats", type=int, default=5)

    return parser


def _cmd_train(args):
    config = _model_config(args)
    tconfig = _train_config(args)
    noise = NoiseSpec(args.sigma, clip=not args.no_clip, seed=args.seed)
    fit(config, tconfig, noise, args.data, log_path=args.log,
        ckpt_path=args.out, ckpt_every=args.ckpt_every)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_denoise(args):
    config, params, _ = load_checkpoint(args.ckpt)
    image = load_image(args.input)
    if image.shape[0] != config.image_channels:
        raise ValueError(
            f"{args.input} has {image.shape[0]} channels but the checkpoint "
            f"expects {config.image_channels}"
        )
    save_image(denoise_array(params, config, image), args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_eval(args):
    config, params, _ = load_checkpoint(args.ckpt)
    report = evaluate_dataset(params, config, args.dataset, args.sigma,
                              seed=args.seed, clip=not args.no_clip,
                              quantized=args.quantized)
    for line in report.lines():
        print(line)
    return EXIT_OK


def _cmd_synth(args):
    clean = load_image(args.input)
    pair = add_awgn(clean, NoiseSpec(args.sigma, clip=args.clip, seed=args.seed))
    clipped = int(np.count_nonzero((pair.noisy < 0) | (pair.noisy > 255)))
    if clipped:
        print(f"warning: {clipped} values outside [0, 255] were clamped "
              f"at encoding", file=sys.stderr)
    save_image(pair.noisy, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_gradcheck(args):
    report = run_grad_check_suite(scale=args.scale, seed=args.seed,
                                  inject_broken_op=args.self_test)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def _cmd_ablate(args):
    config = _model_config(args)
    tconfig = _train_config(args)
    rows = run_ablation(
        args.data, args.eval_data or args.data, config, tconfig,
        stages_list=args.stages_list, sigmas=args.sigmas,
        clip=not args.no_clip,
        progress=lambda s, g, k, v: print(
            f"stages={s} sigma={g:g} {k}: {v:.2f} dB", file=sys.stderr),
    )
    print(format_table(rows))
    print()
    for line in tsv_rows(rows):
        print(line)
    return EXIT_OK


def _cmd_bench(args):
    rows = bench_mod.run_benchmark(repeats=args.repeats)
    print(bench_mod.format_table(rows))
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "bench": _cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
