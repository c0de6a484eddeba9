"""Command-line front end: train / encode / decode / eval / bdrate.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, DataError, NumericError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointiq",
        description="Learned image codec with autoregressive entropy "
                    "modeling and a quality-enhancement stage.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to start from")
    p.add_argument("--stage", default="joint", choices=("a", "b", "joint"),
                   help="a: enhancement only; b: joint; joint: both")
    p.add_argument("--log", default=None,
                   help="CSV training log (default: <out>.log.csv)")

    p = sub.add_parser("encode", help="compress an image to a .jiq stream")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="PNG or PPM image")
    p.add_argument("--output", required=True, help=".jiq output path")
    p.add_argument("--no-gc", action="store_true",
                   help="disable the global-context features")
    p.add_argument("--no-mprm", action="store_true",
                   help="disable the parameter-refinement blocks")
    p.add_argument("--single-gaussian", action="store_true",
                   help="use a single-Gaussian prior (needs a g=1 checkpoint)")
    p.add_argument("--no-enhance", action="store_true",
                   help="skip the enhancement network at decode time")

    p = sub.add_parser("decode", help="decompress a .jiq stream to an image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help=".jiq stream")
    p.add_argument("--output", required=True, help="PNG or PPM output path")

    p = sub.add_parser("eval", help="rate-distortion sweep over a folder")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--no-gc", action="store_true")
    p.add_argument("--no-mprm", action="store_true")
    p.add_argument("--single-gaussian", action="store_true")
    p.add_argument("--no-enhance", action="store_true")

    p = sub.add_parser("bdrate", help="delta-rate between two RD CSVs")
    p.add_argument("anchor", help="anchor curve CSV (from eval)")
    p.add_argument("test", help="test curve CSV (from eval)")
    p.add_argument("--quality", default="psnr_db",
                   choices=("psnr_db", "msssim_db"),
                   help="quality axis for the interpolation")
    return parser


def _flag_overrides(args) -> dict:
    overrides = {}
    if args.no_gc:
        overrides["gc"] = False
    if args.no_mprm:
        overrides["mprm"] = False
    if args.single_gaussian:
        overrides["gmm"] = False
    if args.no_enhance:
        overrides["enhance"] = False
    return overrides


def _worker_count() -> int:
    cap = os.environ.get("JOINTIQ_THREADS")
    avail = os.cpu_count() or 1
    if cap is None:
        return avail
    try:
        return max(1, min(avail, int(cap)))
    except ValueError as exc:
        raise ConfigError(f"JOINTIQ_THREADS must be an integer: {cap!r}") from exc


def _cmd_train(args) -> int:
    from .trainer import joint_training_procedure, parse_config

    if not os.path.exists(args.config):
        raise ConfigError(f"config file {args.config} does not exist")
    config = parse_config(args.config)
    log_path = args.log if args.log is not None else args.out + ".log.csv"
    joint_training_procedure(config, args.data, args.out,
                             resume=args.resume, stage=args.stage,
                             log_path=log_path)
    print(f"wrote {args.out} (log: {log_path})")
    return 0


def _cmd_encode(args) -> int:
    from .codec import encode_image
    from .imageio import read_image
    from .model import CodecModel

    model = CodecModel.load(args.model)
    x = read_image(args.input)
    stream, stats = encode_image(x, model, _flag_overrides(args))
    with open(args.output, "wb") as f:
        f.write(stream)
    print(f"{args.output}: {stats['bytes']} bytes, {stats['bpp']:.4f} bpp")
    return 0


def _cmd_decode(args) -> int:
    from .codec import decode_image
    from .imageio import write_image
    from .model import CodecModel

    model = CodecModel.load(args.model)
    try:
        with open(args.input, "rb") as f:
            stream = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    out, info = decode_image(stream, model)
    write_image(args.output, out)
    h = info["header"]
    print(f"{args.output}: {h.width}x{h.height}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import rd_eval
    from .model import CodecModel

    model = CodecModel.load(args.model)
    rows = rd_eval(model, args.dataset, csv_path=args.csv,
                   flag_overrides=_flag_overrides(args),
                   workers=_worker_count())
    avg = rows[-1]
    print(f"{args.csv}: {len(rows) - 1} images, average "
          f"{avg['bpp']:.4f} bpp / {avg['psnr_db']:.2f} dB")
    return 0


def _cmd_bdrate(args) -> int:
    from .metrics import bd_rate, curve_from_rows, read_rd_csv

    anchor = curve_from_rows(read_rd_csv(args.anchor), args.quality)
    test = curve_from_rows(read_rd_csv(args.test), args.quality)
    delta = bd_rate(anchor, test)
    print(f"{delta:+.4f}%")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "bdrate": _cmd_bdrate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
