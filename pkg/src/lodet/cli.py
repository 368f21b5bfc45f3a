"""Command line entry point: ``lodet {gen-data,train,infer,eval,profile}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .synthetic import SceneSpec, generate_synthetic_dataset


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key, attr in (("seed", "seed"), ("width", "width"), ("input_size", "input_size"),
                      ("nms_thresh", "nms_thresh"), ("score_thresh", "score_thresh"), ("out_dir", "out_dir"),
                      ("data_dir", "data_dir"), ("epochs", "epochs")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    return cfg.replace(**overrides) if overrides else cfg


def _common(p: argparse.ArgumentParser, data: bool = True):
    p.add_argument("--config", help="flat key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=float, help="neck width multiplier")
    p.add_argument("--input-size", type=int)
    p.add_argument("--nms-thresh", type=float, help="oriented NMS IoU threshold (default 0.45)")
    p.add_argument("--score-thresh", type=float)
    p.add_argument("--out-dir")
    if data:
        p.add_argument("--data-dir")


def cmd_gen_data(args) -> int:
    size = args.image_size
    scale = tuple(args.scale) if args.scale else (size / 8, size * 11 / 32)
    spec = SceneSpec(image_size=size, num_train=args.num_train, num_val=args.num_val, seed=args.seed,
                     objects=(args.min_objects, args.max_objects), scale=scale)
    sets = generate_synthetic_dataset(spec, args.out_dir)
    print(f"wrote {len(sets['train'])} train / {len(sets['val'])} val images to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = pipeline.train(cfg)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; final loss {last.loss:.5f}; checkpoint {res.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    out = args.out_dir or str(Path(cfg.out_dir) / "detections")
    res = pipeline.infer(args.checkpoint, args.images, out, cfg, overlay=args.overlay)
    n = sum(len(v) for v in res.values())
    print(f"{n} detections over {len(res)} images written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model, _ = pipeline.load_checkpoint(args.checkpoint)
    data = pipeline.load_dataset(cfg.data_dir, args.split, model.config.input_size)
    res = pipeline.evaluate(model, data, cfg, args.iou, args.ap_method)
    for c, ap in res.ap.items():
        print(f"{data.class_names[c]:<16} AP {ap:.4f}  (gt {res.num_gt[c]})")
    print(f"mAP@{args.iou:g} {res.mAP:.4f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"mAP": res.mAP, "ap": {data.class_names[c]: v for c, v in res.ap.items()},
                   "num_gt": {data.class_names[c]: v for c, v in res.num_gt.items()}}
        (out / "eval.json").write_text(json.dumps(payload, indent=2))
    return 0


def cmd_profile(args) -> int:
    cfg = _run_config(args).replace(neck=args.neck)
    widths = args.widths or [cfg.width]
    sizes = args.input_sizes or [cfg.input_size]
    rows = pipeline.profile(cfg, widths, sizes, args.num_classes, args.out_dir)
    print(f"{'width':>6}{'input':>7}{'GFLOPs':>12}{'params':>12}{'MB':>9}")
    for r in rows:
        print(f"{r['width']:>6g}{r['input_size']:>7d}{r['gflops']:>12.4f}{r['params']:>12d}{r['params_mb']:>9.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lodet", description="Lightweight oriented object detector")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic oriented-object dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-train", type=int, default=16)
    p.add_argument("--num-val", type=int, default=0)
    p.add_argument("--image-size", type=int, default=320)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--scale", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="object size range in pixels (default: image size / 8 to 11/32)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train from scratch")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="detect objects in images")
    _common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--overlay", action="store_true", help="also write annotated PNGs")
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="mAP of a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--ap-method", choices=("all", "11point"), default="all")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="FLOPs / parameter sweep")
    _common(p, data=False)
    p.add_argument("--widths", type=float, nargs="+")
    p.add_argument("--input-sizes", type=int, nargs="+")
    p.add_argument("--neck", choices=("csa_drf", "baseline"), default="csa_drf")
    p.add_argument("--num-classes", type=int, default=15)
    p.set_defaults(fn=cmd_profile)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, pipeline.TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
