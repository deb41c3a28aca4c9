"""Command-line entry point: ``ladrcnn {synth,train,eval,detect,normalize}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure during training.
"""

import argparse
import json
import logging
import os
import sys

import torch

from .checkpoint import load_checkpoint
from .config import load_config
from .data import load_dataset, read_image, write_image
from .errors import ConfigError, EmptyDataset, FormatError, NonFiniteLoss
from .evaluation import evaluate_model
from .inference import detect, detect_and_render, normalize_face, write_detections_json
from .network import build_model
from .synthetic import generate_synthetic
from .targets import Origin
from .trainer import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ladrcnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_synth(args):
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    path = generate_synthetic(args.count, args.size, args.seed, args.out, args.channels)
    print(path)
    return EXIT_OK


def _load_run_config(args):
    overrides = list(args.set or [])
    if getattr(args, "steps", None) is not None:
        overrides.append(f"train.total_steps={args.steps}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_train(args):
    cfg = _load_run_config(args)
    if cfg.train.batch2 > 0 and not args.ds2:
        raise UsageError("--ds2 is required when train.batch2 > 0")
    torch.set_num_threads(args.threads)
    channels = cfg.network.input_channels
    ds1 = list(load_dataset(args.ds1, channels, Origin.DS1))
    ds2 = list(load_dataset(args.ds2, channels, Origin.DS2)) if args.ds2 else []
    model = build_model(cfg.network, seed=cfg.train.seed)
    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    result = train(model, ds1, ds2, cfg.train, log_path=log_path, checkpoint_path=args.out)
    if result.history:
        last = result.history[-1]
        print(f"trained {len(result.history)} steps, final loss {last['total']:.4f}")
    print(args.out)
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_run_config(args)
    score = cfg.infer.score_thresh if args.score is None else args.score
    if args.oracle:
        model, channels = None, None
    else:
        model = load_checkpoint(args.ckpt)
        channels = model.config.input_channels
    samples = list(load_dataset(args.data, channels, Origin.DS1))
    report = evaluate_model(model, samples, rot4=args.rot4, score_thresh=score,
                            nms_iou=cfg.infer.nms_iou, max_out=cfg.infer.max_detections,
                            oracle=args.oracle)
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(report.to_json(include_curve=True))
    if args.pr_csv:
        report.write_pr_csv(args.pr_csv)
    return EXIT_OK


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_detect(args):
    cfg = _load_run_config(args)
    score = cfg.infer.score_thresh if args.score is None else args.score
    model = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = read_image(path)
        out_png = os.path.join(args.out, _stem(path) + ".png")
        dets, _ = detect_and_render(image, model, out_png, path, score,
                                    cfg.infer.nms_iou, cfg.infer.max_detections)
        print(f"{path}: {len(dets)} detection(s)")
    return EXIT_OK


def cmd_normalize(args):
    cfg = _load_run_config(args)
    score = cfg.infer.score_thresh if args.score is None else args.score
    size = cfg.infer.normalize_size if args.size is None else args.size
    margin = cfg.infer.normalize_margin if args.margin is None else args.margin
    model = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    for path in args.images:
        image = read_image(path)
        dets = detect(model, image, score, cfg.infer.nms_iou, cfg.infer.max_detections)
        stem = _stem(path)
        for k, d in enumerate(dets):
            write_image(os.path.join(args.out, f"{stem}_face{k:02d}.png"),
                        normalize_face(image, d, size, margin))
        write_detections_json(os.path.join(args.out, stem + ".json"), path, dets)
        print(f"{path}: {len(dets)} face(s)")
    return EXIT_OK


def _add_config_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")


def build_parser():
    parser = _Parser(prog="ladrcnn", description="Rotation-aware face detector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic oriented-face dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    _add_config_flags(p)
    p.add_argument("--ds1", required=True, help="manifest of angle-labeled images")
    p.add_argument("--ds2", help="manifest of box-only images")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled manifest")
    _add_config_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--rot4", action="store_true", help="also evaluate 90/180/270 degree rotations")
    p.add_argument("--oracle", action="store_true", help="score the ground truth as detections")
    p.add_argument("--score", type=float)
    p.add_argument("--json", help="write the report (with PR curve) as JSON")
    p.add_argument("--pr-csv", help="write the PR curve as CSV")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("detect", cmd_detect, "annotate images with detections"),
                              ("normalize", cmd_normalize, "write upright face crops")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--images", nargs="+", required=True)
        p.add_argument("--score", type=float)
        p.add_argument("--out", required=True, help="output directory")
        if name == "normalize":
            p.add_argument("--size", type=int)
            p.add_argument("--margin", type=float)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "eval" and not args.oracle and not args.ckpt:
        parser.error("eval needs --ckpt unless --oracle is given")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EmptyDataset, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
