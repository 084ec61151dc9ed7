"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attention import random_last_block_params
from .encoder import EncoderConfig, toy_encode
from .images import read_ppm, read_pgm, write_pgm
from .metrics import accumulate_confusion, compute_fg_iou, compute_miou, load_manifest
from .pipeline import InferenceConfig, argmax_mask, resize_long_side, slide_inference
from .tensorio import FormatError, save_feature_dump, save_tensor
from .textbank import load_text_bank, write_toy_bank
from .training import TrainConfig, train_upsampler
from .upsampler import load_upsampler_checkpoint


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_encoder_args(sub):
    sub.add_argument("--patch-size", type=int, default=8)
    sub.add_argument("--depth", type=int, default=2)
    sub.add_argument("--dim", type=int, default=32)
    sub.add_argument("--proj-dim", type=int, default=16)
    sub.add_argument("--encoder-seed", type=int, default=0)


def _encoder_cfg(args) -> EncoderConfig:
    return EncoderConfig(patch_size=args.patch_size, depth=args.depth,
                         dim=args.dim, proj_dim=args.proj_dim, seed=args.encoder_seed)


def _bank_paths(manifest_path: str):
    manifest = Path(manifest_path)
    return manifest, manifest.with_suffix(".sfup")


def build_parser() -> _Parser:
    parser = _Parser(prog="featseg",
                     description="Training-free open-vocabulary segmentation with a "
                                 "learnable feature upsampler")
    subs = parser.add_subparsers(dest="command", required=True)

    train = subs.add_parser("train-upsampler", help="train the feature upsampler")
    train.add_argument("--corpus", required=True, help="directory of .ppm images")
    train.add_argument("--out", required=True, help="checkpoint directory (also gets the report)")
    train.add_argument("--gamma", type=float, default=0.1)
    train.add_argument("--steps", type=int, default=200)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--batch", type=int, default=1)
    train.add_argument("--crop", type=int, default=64)
    train.add_argument("--factor", type=int, default=8)
    train.add_argument("--augment", default="", help="comma list from flip,translate,zoom")
    _add_encoder_args(train)

    seg = subs.add_parser("segment", help="segment one image into a class-index mask")
    seg.add_argument("--image", required=True, help="input .ppm image")
    seg.add_argument("--checkpoint", required=True, help="upsampler checkpoint directory")
    seg.add_argument("--bank", required=True, help="text bank manifest (.json; embeddings beside it)")
    seg.add_argument("--lambda", dest="lam", type=float, default=0.3)
    seg.add_argument("--window", type=int, default=224)
    seg.add_argument("--stride", type=int, default=112)
    seg.add_argument("--long-side", type=int, default=448)
    seg.add_argument("--upsample-factor", type=int, default=None)
    seg.add_argument("--feature-source", choices=["attention", "early_tap"], default="attention")
    seg.add_argument("--out", required=True, help="output mask (.pgm)")
    seg.add_argument("--dump-logits", default=None, help="optional logits tensor path")
    _add_encoder_args(seg)

    ev = subs.add_parser("eval", help="score predicted masks against a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--pred-dir", required=True, help="directory of predicted .pgm masks")
    ev.add_argument("--fg-class", default=None, help="report single-class IoU for this class")
    ev.add_argument("--out", default=None, help="report basename; writes .json, .csv and .png")

    dump = subs.add_parser("dump-features", help="encode an image and dump its tokens")
    dump.add_argument("--image", required=True)
    dump.add_argument("--out", required=True, help="output .sfup path (sidecar .meta beside it)")
    _add_encoder_args(dump)

    bank = subs.add_parser("make-toy-bank", help="write a seeded random text-embedding bank")
    bank.add_argument("--class", dest="classes", action="append", required=True,
                      metavar="NAME[=SUB1,SUB2,...]",
                      help="class with optional prompt subclasses; repeatable")
    bank.add_argument("--dim", type=int, default=16)
    bank.add_argument("--seed", type=int, default=0)
    bank.add_argument("--out", required=True, help="manifest path (.json; embeddings beside it)")
    return parser


def cmd_train(args) -> int:
    cfg = TrainConfig(gamma=args.gamma, lr=args.lr, steps=args.steps, batch=args.batch,
                      crop=args.crop, factor=args.factor, seed=args.seed,
                      augment=tuple(f for f in args.augment.split(",") if f))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = train_upsampler(args.corpus, cfg, _encoder_cfg(args),
                             checkpoint_dir=out, report_path=out / "report.jsonl")
    from .report import write_loss_report
    write_loss_report(report, out / "losses.csv", out / "loss_curve.png")
    if report.loss_total:
        print(f"final loss {report.loss_total[-1]:.6g} "
              f"(initial {report.loss_total[0]:.6g}) over {len(report.loss_total)} steps")
    print(f"checkpoint written to {out}")
    return 0


def cmd_segment(args) -> int:
    enc_cfg = _encoder_cfg(args)
    cfg = InferenceConfig(lam=args.lam, window=args.window, stride=args.stride,
                          long_side=args.long_side, upsample_factor=args.upsample_factor,
                          feature_source=args.feature_source)
    manifest, embeddings = _bank_paths(args.bank)
    bank = load_text_bank(manifest, embeddings)
    jbu, _, _ = load_upsampler_checkpoint(args.checkpoint, inference_only=True)
    block = random_last_block_params(enc_cfg)
    image = resize_long_side(read_ppm(args.image), cfg.long_side, enc_cfg.patch_size)
    logits, _ = slide_inference(image, enc_cfg, block, jbu, bank, cfg)
    mask = argmax_mask(logits, bank.classes)
    write_pgm(args.out, mask.indices)
    with open(str(args.out) + ".json", "w") as f:
        json.dump({"classes": mask.classes}, f, indent=2)
    if args.dump_logits:
        save_tensor(args.dump_logits, logits)
    print(f"mask written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    classes, entries = load_manifest(args.manifest)
    names = [c["name"] for c in classes]
    K = len(names)
    pred_dir = Path(args.pred_dir)
    confusion = None
    for entry in entries:
        pred_path = pred_dir / (Path(entry["image"]).stem + ".pgm")
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        confusion = accumulate_confusion(read_pgm(pred_path), read_pgm(entry["mask"]),
                                         K, confusion)
    metrics = compute_miou(confusion, names)
    if args.fg_class is not None:
        if args.fg_class not in names:
            raise ValueError(f"foreground class {args.fg_class!r} not in manifest")
        metrics.fg_iou = compute_fg_iou(confusion, names.index(args.fg_class))
    print(json.dumps(metrics.to_dict(), indent=2))
    if args.out:
        base = Path(args.out)
        metrics.write_json(base.with_suffix(".json"))
        from .report import write_metrics_report
        write_metrics_report(metrics, base.with_suffix(".csv"), base.with_suffix(".png"))
    return 0


def cmd_dump_features(args) -> int:
    tokens = toy_encode(read_ppm(args.image), _encoder_cfg(args))
    save_feature_dump(args.out, tokens.tokens, tokens.grid)
    print(f"features written to {args.out}")
    return 0


def cmd_make_toy_bank(args) -> int:
    spec = []
    for item in args.classes:
        name, _, subs = item.partition("=")
        sub_list = [s for s in subs.split(",") if s] if subs else [name]
        spec.append((name, sub_list))
    manifest, embeddings = _bank_paths(args.out)
    write_toy_bank(manifest, embeddings, spec, args.dim, args.seed)
    print(f"bank written to {manifest} and {embeddings}")
    return 0


_COMMANDS = {
    "train-upsampler": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "dump-features": cmd_dump_features,
    "make-toy-bank": cmd_make_toy_bank,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
