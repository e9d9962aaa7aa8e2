"""Command-line entry point: ``protorefine <command> [options]``.

Exit status is 0 on success, 1 on invalid input (bad flags, manifests,
configs, checkpoints that do not fit) and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .coarse_sim import SimConfig, simulate_coarse_mask, write_ellipse_sidecar
from .config import load_config, write_resolved
from .dataset import (
    DatasetManifest,
    ImageRecord,
    build_idrid_manifest,
    extract_patch_pairs,
    load_manifest,
    read_patch_store,
    write_mask,
    write_patch_store,
)
from .errors import ValidationError
from .protonet import HEADS, load_model
from .refine_eval import (
    evaluate_manifest,
    load_or_simulate_coarse,
    reduction_sweep,
    refine_image,
    render_overlay,
    sidecar_path,
    write_sweep,
)
from .superpixel import mask_slic
from .trainer import TrainConfig, train

log = logging.getLogger("protorefine")

RESOLVED_NAME = "resolved_config.json"


class UsageError(Exception):
    """Raised instead of exiting when argument parsing fails."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers


def _factors(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad factor list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("factor list is empty")
    return vals


def _resolve(args):
    """Apply the uniform flags on top of the config file."""
    cfg = load_config(args.config)
    model, train_cfg, sim = cfg.model, cfg.train, cfg.sim
    if args.head is not None:
        model = replace(model, head=args.head)
    if args.threshold is not None:
        model = replace(model, threshold=args.threshold)
    if args.reduction_factor is not None:
        sim = replace(sim, reduction_factor=args.reduction_factor)
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    return replace(cfg, model=model, train=train_cfg, sim=sim)


def _seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _load(args, cfg, path):
    """Load a checkpoint; a model section in --config must match its shapes."""
    model, _ = load_model(path, cfg.model if "model" in cfg.explicit else None)
    overrides = {}
    if args.head is not None:
        overrides["head"] = args.head
    if args.threshold is not None:
        overrides["threshold"] = args.threshold
    if overrides:
        model.config = replace(model.config, **overrides)
    return model


def _sidecar(args, cfg, directory, **extra):
    return write_resolved(
        cfg, Path(directory) / RESOLVED_NAME, command=args.command, seed=args.seed, argv=sys.argv[1:], **extra
    )


def _classes(args, manifest):
    if not args.classes:
        return list(manifest.classes)
    unknown = [c for c in args.classes if c not in manifest.classes]
    if unknown:
        raise ValidationError(f"classes not in manifest: {', '.join(unknown)}")
    return args.classes


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg):
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    n = 0
    for rec in manifest.records:
        image_shape = None
        for cls in _classes(args, manifest):
            fine = rec.load_mask(cls, image_shape)
            image_shape = fine.shape
            coarse = simulate_coarse_mask(fine, cfg.sim)
            write_mask(out / "masks" / cls / f"{rec.id}.png", coarse.mask)
            write_ellipse_sidecar(sidecar_path(out, rec.id, cls), rec.id, cls, coarse, cfg.sim.reduction_factor)
            n += 1
    _sidecar(args, cfg, out, manifest=str(args.manifest))
    log.info("wrote %d coarse masks to %s", n, out)


def cmd_extract(args, cfg):
    manifest = load_manifest(args.manifest)
    pairs = []
    for rec in manifest.records:
        image = rec.load_image()
        for cls in _classes(args, manifest):
            fine = rec.load_mask(cls, image.shape[:2])
            coarse = load_or_simulate_coarse(rec.id, cls, fine, cfg.sim, args.coarse)
            if coarse.ellipses:
                pairs.extend(
                    extract_patch_pairs(
                        rec, cls, coarse.ellipses, coarse, cfg.patch_size, cfg.margin, image=image, fine=fine
                    )
                )
    store = write_patch_store(pairs, args.out)
    _sidecar(args, cfg, args.out, manifest=str(args.manifest), coarse=args.coarse, n_pairs=len(pairs))
    log.info("patch store %s holds %d pairs", args.out, len(store.ids()))


def cmd_train(args, cfg):
    pairs = list(read_patch_store(args.store))
    if not pairs:
        raise ValidationError(f"patch store {args.store} is empty")
    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    cfg = replace(cfg, train=train_cfg)
    _seed_everything(train_cfg.seed)
    _sidecar(args, cfg, args.out, store=str(args.store))
    result = train(pairs, cfg.model, train_cfg, args.out)
    log.info("best validation IoU %.4f, checkpoint %s", result.state.best_iou, result.best_checkpoint)


def cmd_refine(args, cfg):
    manifest = load_manifest(args.manifest)
    model = _load(args, cfg, args.checkpoint)
    out = Path(args.out).resolve()
    classes = _classes(args, manifest)
    records = []
    for rec in manifest.records:
        image = rec.load_image()
        masks = {}
        for cls in classes:
            fine = rec.load_mask(cls, image.shape[:2])
            coarse = load_or_simulate_coarse(rec.id, cls, fine, cfg.sim, args.coarse)
            if coarse.ellipses:
                refined = refine_image(image, coarse, model, cls, rec.id, cfg.margin).mask
            else:
                refined = np.zeros(image.shape[:2], dtype=bool)
            src = rec.masks.get(cls)
            rel = Path(src).relative_to(manifest.root) if src is not None else Path("masks") / cls / f"{rec.id}.png"
            write_mask(out / rel, refined)
            masks[cls] = out / rel
        records.append(ImageRecord(rec.id, Path(rec.image).resolve(), masks))
    DatasetManifest(out, manifest.split, classes, records).save(out / "manifest.json")
    _sidecar(args, cfg, out, manifest=str(args.manifest), checkpoint=str(args.checkpoint), model=model.config.to_dict())
    log.info("refined masks for %d images written to %s", len(records), out)


def cmd_eval(args, cfg):
    manifest = load_manifest(args.manifest)
    model = _load(args, cfg, args.checkpoint) if args.checkpoint else None
    report = evaluate_manifest(
        manifest, model, cfg.sim, _classes(args, manifest), cfg.margin, coarse_dir=args.coarse
    )
    out = Path(args.out)
    report.write(out)
    _sidecar(
        args,
        cfg,
        out.parent,
        manifest=str(args.manifest),
        checkpoint=args.checkpoint,
        report=str(out),
        model=model.config.to_dict() if model is not None else None,
    )
    print(json.dumps(report.to_dict(), indent=2))


def _sweep_models(args, cfg):
    models = {}
    for entry in args.checkpoint or []:
        head, sep, path = entry.partition("=")
        if not sep:
            head, path = None, entry
        elif head not in HEADS:
            raise ValidationError(f"unknown head {head!r} in --checkpoint {entry!r}")
        model = _load(args, cfg, path)
        head = head or model.config.head
        if head in models:
            raise ValidationError(f"head {head!r} given twice; label checkpoints as HEAD=PATH")
        models[head] = (model, head)
    return models


def cmd_sweep(args, cfg):
    manifest = load_manifest(args.manifest)
    if not all(1.0 <= f <= 2.0 for f in args.factors) and not args.allow_any_factor:
        raise ValidationError(f"factors must lie in [1.0, 2.0] (got {args.factors}); see --allow-any-factor")
    rows = reduction_sweep(
        manifest, _sweep_models(args, cfg), args.factors, cfg.sim, _classes(args, manifest), cfg.margin
    )
    csv_path, png_path = write_sweep(rows, args.out)
    _sidecar(args, cfg, args.out, manifest=str(args.manifest), checkpoints=args.checkpoint, factors=args.factors)
    log.info("sweep table %s, plot %s", csv_path, png_path)


def cmd_overlay(args, cfg):
    manifest = load_manifest(args.manifest)
    rec = manifest.record(args.image_id) if args.image_id in {r.id for r in manifest.records} else None
    if rec is None:
        raise ValidationError(f"image id {args.image_id!r} not in manifest")
    cls = args.lesion_class
    if cls not in manifest.classes:
        raise ValidationError(f"class {cls!r} not in manifest")
    image = rec.load_image()
    gt = rec.load_mask(cls, image.shape[:2])
    coarse = load_or_simulate_coarse(rec.id, cls, gt, cfg.sim, args.coarse)
    refined = None
    if args.checkpoint and coarse.ellipses:
        model = _load(args, cfg, args.checkpoint)
        refined = refine_image(image, coarse, model, cls, rec.id, cfg.margin).mask
    labels = None
    if args.superpixels and coarse.mask.any():
        labels = mask_slic(image, coarse.mask, cfg.model.n_sp, cfg.model.slic_compactness, cfg.model.slic_iters).labels
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    render_overlay(image, coarse.mask, refined, gt, out, labels)
    _sidecar(args, cfg, out.parent, manifest=str(args.manifest), image_id=rec.id, checkpoint=args.checkpoint)
    log.info("overlay written to %s", out)


def cmd_idrid_manifest(args, cfg):
    manifest = build_idrid_manifest(args.root, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    log.info("wrote %d %s images to %s", len(manifest), args.split, out)


COMMANDS = {
    "idrid-manifest": cmd_idrid_manifest,
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "overlay": cmd_overlay,
}


# ---------------------------------------------------------------- parser


def build_parser():
    common = Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=None, help="seed for simulation, training and RNGs")
    g.add_argument("--config", default=None, help="YAML or JSON config with model/train/sim sections")
    g.add_argument("--head", choices=HEADS, default=None, help="refinement head (overrides the config)")
    g.add_argument("--reduction-factor", type=float, default=None, help="coarse simulation reduction factor")
    g.add_argument("--threshold", type=float, default=None, help="probability threshold for the refined mask")
    g.add_argument("--classes", nargs="+", default=None, help="restrict to these lesion classes")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = Parser(prog="protorefine", description="Prototype-based refinement of coarse lesion masks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("idrid-manifest", parents=[common], help="write a manifest for the IDRiD folder layout")
    p.add_argument("--root", required=True, help="folder holding '1. Original Images' and the ground truths")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate coarse ellipse masks from fine masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="coarse", help="directory for masks/ and *.ellipses.json sidecars")

    p = sub.add_parser("extract", parents=[common], help="cut patch pairs into a patch store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--coarse", default=None, help="directory of ellipse sidecars (simulated when absent)")
    p.add_argument("--out", default="patches")

    p = sub.add_parser("train", parents=[common], help="train a refinement network on a patch store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("refine", parents=[common], help="refine full images and write refined masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--coarse", default=None)
    p.add_argument("--out", default="refined")

    p = sub.add_parser("eval", parents=[common], help="image-level IoU of refined (or coarse) masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", default=None, help="omit to score the coarse masks themselves")
    p.add_argument("--coarse", default=None)
    p.add_argument("--out", default="eval/report.json")

    p = sub.add_parser("sweep", parents=[common], help="IoU against reduction factor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", help="PATH or HEAD=PATH; repeatable")
    p.add_argument("--factors", type=_factors, default=[1.0, 1.25, 1.5, 1.75, 2.0])
    p.add_argument("--allow-any-factor", action="store_true")
    p.add_argument("--out", default="sweep")

    p = sub.add_parser("overlay", parents=[common], help="draw GT, coarse, refined and superpixel boundaries")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--class", dest="lesion_class", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--coarse", default=None)
    p.add_argument("--superpixels", action="store_true")
    p.add_argument("--out", default="overlay.png")
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
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.seed is not None:
            _seed_everything(args.seed)
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
