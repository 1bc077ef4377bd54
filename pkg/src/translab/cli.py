"""``translab`` command-line entry point.

Exit codes: 0 success, 1 invalid arguments/configuration, 2 runtime failure.
The compute device is taken from the ``TRANSLAB_DEVICE`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from translab import datasets, engine, metrics
from translab.boundary import DEFAULT_THICKNESS, generate_boundary
from translab.losses import LossConfig
from translab.model import ModelConfig

logger = logging.getLogger("translab")

OVERLAY_COLORS = {1: (0, 0, 255), 2: (165, 42, 42)}


class UsageError(Exception):
    pass


class CommandFailed(Exception):
    pass


@contextmanager
def running():
    """Marks the side-effect phase: failures inside map to exit code 2."""
    try:
        yield
    except Exception as exc:
        raise CommandFailed(f"{type(exc).__name__}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config flags


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(cast):
    def parse(text):
        return None if str(text).lower() in ("none", "null", "") else cast(text)
    return parse


def _csv_of(cast):
    def parse(text):
        text = str(text).strip()
        return tuple(cast(t) for t in text.split(",") if t.strip()) if text else ()
    return parse


_FLAG_TYPES = {
    "aspp_rates": _csv_of(int),
    "bam_levels": _csv_of(str),
    "decoder_channels": _optional(_csv_of(int)),
    "iterations": _optional(int),
    "aspp_channels": _optional(int),
    "boundary_channels": _optional(int),
    "boundary_aspp_reduce": _optional(int),
    "focal_alpha": _optional(float),
}


def _config_fields():
    defaults = engine.TrainConfig()
    for cls, obj in ((engine.TrainConfig, defaults), (LossConfig, defaults.loss),
                     (ModelConfig, defaults.model)):
        for f in dataclasses.fields(cls):
            if f.name in ("loss", "model"):
                continue
            yield f.name, getattr(obj, f.name)


def _fmt_default(value):
    if isinstance(value, (tuple, list)):
        return ",".join(map(str, value)) or "''"
    return str(value)


def add_config_flags(parser):
    group = parser.add_argument_group("configuration (override --config values)")
    group.add_argument("--config", type=Path, help="flat YAML/JSON key-value config file")
    for name, default in _config_fields():
        if name in _FLAG_TYPES:
            cast = _FLAG_TYPES[name]
        elif isinstance(default, bool):
            cast = _parse_bool
        else:
            cast = type(default)
        flag = "--" + ("lambda" if name == "lam" else name).replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{name}", type=cast, default=None,
                           metavar=name.upper(), help=f"(default: {_fmt_default(default)})")


def config_from_args(args):
    values = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        loaded = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a flat key-value mapping")
        values.update(loaded)
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            values[key[4:]] = value
    return engine.config_from_flat(values)


def echo_config(config, extra=None):
    record = {"config": config.to_flat(), **(extra or {})}
    print(json.dumps(record, default=str), flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    config = config_from_args(args)
    datasets.load_manifest(args.root, "train")
    echo_config(config, {"root": str(args.root), "out": str(args.out)})
    with running():
        result = engine.train(config, args.root, args.out, resume=args.resume, progress=True)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(result.checkpoint), "final": last}))


def cmd_evaluate(args):
    records = datasets.load_manifest(args.root, args.split)
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("give exactly one of --checkpoint or --pred-dir")
    if args.checkpoint is not None:
        if not args.checkpoint.is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model, config, _ = engine.load_checkpoint(args.checkpoint, engine.select_device())
        input_size = args.input_size or config.input_size
        echo_config(config, {"root": str(args.root), "split": args.split,
                             "checkpoint": str(args.checkpoint), "input_size": input_size})
        with running():
            reports = engine.evaluate_model(model, records, input_size)
    else:
        print(json.dumps({"root": str(args.root), "split": args.split,
                          "pred_dir": str(args.pred_dir)}), flush=True)
        with running():
            reports = metrics.evaluate_predictions(args.pred_dir, records)
    if args.out is not None:
        with running():
            metrics.write_reports(reports, args.out)
    print(metrics.report_to_json(reports))


def _overlay(image, mask, alpha=0.5):
    out = image.astype(np.float64)
    for class_id, color in OVERLAY_COLORS.items():
        sel = mask == class_id
        out[sel] = (1 - alpha) * out[sel] + alpha * np.array(color)
    return out.astype(np.uint8)


def cmd_predict(args):
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, config, _ = engine.load_checkpoint(args.checkpoint, engine.select_device())
    model.eval()
    input_size = args.input_size or config.input_size
    with running():
        _predict_all(args, model, input_size)


def _predict_all(args, model, input_size):
    args.out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        try:
            image = datasets.load_image(path)
        except Exception as exc:  # unreadable or not an image
            logger.warning("skipping %s: %s", path, exc)
            failures += 1
            continue
        mask, boundary = engine.predict_image(model, image, input_size)
        stem = Path(path).stem
        datasets.encode_mask(mask, args.out / f"{stem}{datasets.MASK_SUFFIX}")
        if args.emit_boundary and boundary is not None:
            Image.fromarray(np.round(boundary * 255).astype(np.uint8)).save(
                args.out / f"{stem}_boundary.png")
        if args.overlay:
            Image.fromarray(_overlay(image, mask)).save(args.out / f"{stem}_overlay.png")
        print(args.out / f"{stem}{datasets.MASK_SUFFIX}", file=sys.stderr)
    if failures == len(args.images):
        raise RuntimeError("no image could be read")


def cmd_gen_boundary(args):
    if args.thickness < 1:
        raise UsageError("--thickness must be >= 1")
    if args.masks:
        paths = list(args.masks)
    elif args.root is not None:
        paths = [r.mask_path for r in datasets.load_manifest(args.root, args.split)]
    else:
        raise UsageError("give --root/--split or mask files")
    with running():
        for path in paths:
            band = generate_boundary(datasets.decode_mask(path), args.thickness)
            name = Path(path).name
            stem = name[: -len(datasets.MASK_SUFFIX)] if name.endswith(datasets.MASK_SUFFIX) \
                else Path(name).stem
            out_dir = args.out or Path(path).parent
            out_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(band * 255).save(out_dir / f"{stem}_boundary.png")
    print(json.dumps({"written": len(paths), "thickness": args.thickness}))


def cmd_dataset_stats(args):
    records = datasets.load_manifest(args.root, args.split, args.difficulty)
    if not records:
        raise UsageError(f"no records for split {args.split!r} ({args.difficulty})")
    with running():
        stats = datasets.compute_stats(records)
    print(stats.to_json(include_heatmap=args.heatmap))


def cmd_make_synthetic(args):
    if args.n_images < 1:
        raise UsageError("--n-images must be >= 1")
    if args.n_val < 0 or args.image_size < 16:
        raise UsageError("--n-val must be >= 0 and --image-size >= 16")
    with running():
        root = datasets.make_synthetic(args.out, args.n_images, args.image_size, args.seed,
                                       n_val=args.n_val)
    print(json.dumps({"root": str(root), "train": args.n_images, "validation": args.n_val}))


def cmd_ablate(args):
    config = config_from_args(args)
    datasets.load_manifest(args.root, "train")
    datasets.load_manifest(args.root, args.eval_split)
    echo_config(config, {"spec": args.spec, "seeds": list(args.seeds)})
    with running():
        rows = engine.run_ablation(args.spec, config, args.root, seeds=tuple(args.seeds),
                                   eval_split=args.eval_split, work_dir=args.work_dir,
                                   attend_in_loss_sweep=args.attend, progress=True)
        if args.out is not None:
            engine.write_ablation_csv(rows, args.out)
    engine.write_ablation_csv(rows, sys.stdout)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="translab", description=__doc__.splitlines()[0],
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--root", type=Path, required=True, help="dataset root")
    p.add_argument("--out", type=Path, default=Path("runs/translab"), help="output directory")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint or a directory of predicted masks",
                       formatter_class=fmt)
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--pred-dir", type=Path)
    p.add_argument("--input-size", type=int, help="override the checkpoint's input size")
    p.add_argument("--out", type=Path, help="directory for report.json and report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write masks for images", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--emit-boundary", action="store_true")
    p.add_argument("--overlay", action="store_true", help="also write color overlays")
    p.add_argument("--input-size", type=int)
    p.add_argument("images", nargs="+", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gen-boundary", help="write boundary ground truth PNGs",
                       formatter_class=fmt)
    p.add_argument("--root", type=Path)
    p.add_argument("--split", default="train")
    p.add_argument("--thickness", type=int, default=DEFAULT_THICKNESS)
    p.add_argument("--out", type=Path, help="output directory (default: next to each mask)")
    p.add_argument("masks", nargs="*", type=Path)
    p.set_defaults(func=cmd_gen_boundary)

    p = sub.add_parser("dataset-stats", help="dataset statistics as JSON", formatter_class=fmt)
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--difficulty", default="all", choices=("all", "easy", "hard"))
    p.add_argument("--heatmap", action="store_true", help="include location heatmaps")
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset",
                       formatter_class=fmt)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-images", type=int, default=8)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("ablate", help="run an ablation sweep", formatter_class=fmt)
    p.add_argument("--spec", required=True, choices=engine.ABLATION_SPECS)
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--eval-split", default="validation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--work-dir", type=Path)
    p.add_argument("--attend", action="store_true",
                   help="keep BAM levels for the boundary-loss variants")
    p.add_argument("--out", type=Path, help="CSV file (also printed to stdout)")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args.func(args)
    except CommandFailed as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, datasets.DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
