"""Command-line entry point.

Subcommands: train, encode, decode, sweep, bdrate, bench. Values come from
an optional key=value config file (--config) overlaid by flags; every run
echoes its fully resolved configuration to the log. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys

from . import container, evaluation, training
from .config import EvalConfig, TrainConfig, build_config, config_echo, parse_config_file
from .errors import PxcError
from .vmaf import ENV_VAR, VmafClient

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser():
    parser = _Parser(prog="pxc", description="Perceptually trained learned image codec.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--workers", type=int, help="worker threads / processes")
    parser.add_argument("--vmaf-cmd", dest="vmaf_cmd",
                        help="VMAF command template with {ref} {dist} {out} placeholders")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="run alternating training")
    p.add_argument("--data", help="training image directory")
    p.add_argument("--checkpoint", help="final checkpoint output path")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="rd_lambda", help="rate-distortion tradeoff")
    p.add_argument("--alpha", help="proxy/pixel loss mix in [0,1]")
    p.add_argument("--alpha-warmup", type=int, dest="alpha_warmup",
                   help="steps before the proxy term enters the codec loss (0 = immediately)")
    p.add_argument("--target", help="quality model: psnr | ssim | msssim | vmaf")
    p.add_argument("--filters", type=int, help="latent channel count")
    p.add_argument("--batch", type=int, dest="batch_size")
    p.add_argument("--patch", type=int, dest="patch_size")
    p.add_argument("--lr", help="base learning rate")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--freeze-proxy-after", type=int, dest="freeze_proxy_after",
                   help="freeze the proxy after this many steps (ablation; 0 = never)")

    p = sub.add_parser("encode", help="compress one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decompress one bitstream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="rate-distortion sweep over checkpoints")
    p.add_argument("--ckpts", nargs="+", required=True, help="checkpoint files, one per operating point")
    p.add_argument("--images", help="evaluation image directory")
    p.add_argument("--out", help="output CSV path")

    p = sub.add_parser("bdrate", help="BD-rate between RD CSVs")
    p.add_argument("--ref", required=True, help="reference curve CSV")
    p.add_argument("--test", required=True, help="test curve CSV")
    p.add_argument("--metric", default="psnr", choices=evaluation.METRIC_COLUMNS)
    p.add_argument("--report-json", dest="report_json", help="write the full multi-metric report as JSON")
    p.add_argument("--report-text", dest="report_text", help="write the full report as a text table")

    p = sub.add_parser("bench", help="encode/decode runtime benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", help="benchmark image directory")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", help="write the timing report as JSON")
    return parser


def _vmaf_client(cfg):
    if cfg.vmaf_cmd:
        return VmafClient(cfg.vmaf_cmd, timeout=cfg.vmaf_timeout, workers=cfg.workers)
    if os.environ.get(ENV_VAR):
        return VmafClient.from_env(timeout=cfg.vmaf_timeout, workers=cfg.workers)
    return None


def _echo(cfg):
    for line in config_echo(cfg):
        log.info("config: %s", line)


def _cmd_train(args, mapping):
    cfg = build_config(TrainConfig, mapping, {
        "data_dir": args.data,
        "checkpoint": args.checkpoint,
        "log_csv": args.log,
        "steps": args.steps,
        "rd_lambda": args.rd_lambda,
        "alpha": args.alpha,
        "alpha_warmup": args.alpha_warmup,
        "target_metric": args.target,
        "filters": args.filters,
        "batch_size": args.batch_size,
        "patch_size": args.patch_size,
        "lr": args.lr,
        "checkpoint_every": args.checkpoint_every,
        "freeze_proxy_after": args.freeze_proxy_after,
        "seed": args.seed,
        "workers": args.workers,
        "vmaf_cmd": args.vmaf_cmd,
    })
    _echo(cfg)
    path = training.train(cfg)
    print(path)
    return 0


def _cmd_encode(args):
    bundle = container.load_checkpoint(args.ckpt)
    codec = bundle.build_codec()
    stats = container.encode_image(codec, args.input, args.out, digest=bundle.digest)
    print(f"{args.out}: {stats.bpp:.4f} bpp, {stats.file_bytes} bytes, "
          f"{stats.seconds * 1000.0:.1f} ms")
    return 0


def _cmd_decode(args):
    bundle = container.load_checkpoint(args.ckpt)
    codec = bundle.build_codec()
    stats = container.decode_image(codec, args.input, args.out, digest=bundle.digest)
    print(f"{args.out}: {stats.width}x{stats.height}, {stats.seconds * 1000.0:.1f} ms")
    return 0


def _cmd_sweep(args, mapping):
    cfg = build_config(EvalConfig, mapping, {
        "image_dir": args.images,
        "out_csv": args.out,
        "workers": args.workers,
        "vmaf_cmd": args.vmaf_cmd,
    })
    _echo(cfg)
    points = evaluation.rd_sweep(
        args.ckpts, cfg.image_dir, out_csv=cfg.out_csv,
        workers=cfg.workers, vmaf=_vmaf_client(cfg),
    )
    print(f"{cfg.out_csv}: {len(points)} RD points")
    return 0


def _cmd_bdrate(args):
    ref_points = evaluation.read_rd_csv(args.ref)
    test_points = evaluation.read_rd_csv(args.test)
    ref_codecs = sorted({p.codec for p in ref_points})
    if len(ref_codecs) != 1:
        raise PxcError(
            f"--ref must hold exactly one codec, found {ref_codecs}; "
            "split the CSV or use it as a combined report input"
        )
    baseline = ref_codecs[0]
    report = evaluation.evaluate_report(ref_points + test_points, baseline)
    if args.report_json:
        with open(args.report_json, "w") as fh:
            fh.write(report.to_json() + "\n")
    if args.report_text:
        with open(args.report_text, "w") as fh:
            fh.write(report.to_text())
    test_codecs = sorted({p.codec for p in test_points} - {baseline})
    if len(test_codecs) == 1 and not (args.report_json or args.report_text):
        cell = report.results[test_codecs[0]][args.metric]
        if cell["mean"] is None:
            raise PxcError(
                f"no image produced a usable {args.metric} BD-rate: {cell['skipped']}"
            )
        for image, reason in sorted(cell["skipped"].items()):
            log.warning("%s skipped: %s", image, reason)
        print(f"{cell['mean']:.2f}%")
    else:
        print(report.to_text(), end="")
    return 0


def _cmd_bench(args, mapping):
    cfg = build_config(EvalConfig, mapping, {
        "image_dir": args.images,
        "workers": args.workers,
        "bench_reps": args.reps,
    })
    _echo(cfg)
    report = evaluation.runtime_bench(
        args.ckpt, cfg.image_dir, repetitions=cfg.bench_reps, workers=cfg.workers
    )
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def parse_and_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        mapping = parse_config_file(args.config) if args.config else {}
        if args.command == "train":
            return _cmd_train(args, mapping)
        if args.command == "encode":
            return _cmd_encode(args)
        if args.command == "decode":
            return _cmd_decode(args)
        if args.command == "sweep":
            return _cmd_sweep(args, mapping)
        if args.command == "bdrate":
            return _cmd_bdrate(args)
        if args.command == "bench":
            return _cmd_bench(args, mapping)
        raise UsageError(f"unknown command {args.command!r}")
    except (PxcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s"
    )
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
