"""Command-line surface: gen-data, train, detect, evaluate, check-grads, emit-maps."""

from __future__ import annotations

import argparse
import os
import sys

from . import data as datamod
from .container import load_container
from .detection import (
    detect, save_heatmap, scan_likelihood_map, write_detections, read_detections,
)
from .errors import CompdetError, DataError
from .evaluation import evaluate
from .features import extract_features, load_image
from .model import CORNER_ROLES
from .training import TrainConfig, grad_check_suite, train

GRAD_TOLERANCE = 1e-4


def _add_detect_flags(p):
    p.add_argument("--omega", type=float, default=None,
                   help="context prior override (0 = object only)")
    p.add_argument("--threshold", type=float, default=-1e18)
    p.add_argument("--nms-radius", type=int, default=2)
    p.add_argument("--search-window", type=int, default=None)
    p.add_argument("--box-mode", choices=["voted", "fixed"], default="voted")
    p.add_argument("--no-occluder", action="store_true",
                   help="disable the occluder outlier model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compdet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic occlusion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=96)
    p.add_argument("--object-scale", type=int, default=48)
    p.add_argument("--train-per-class", type=int, default=12)
    p.add_argument("--val-per-class", type=int, default=4)
    p.add_argument("--test-per-class", type=int, default=8)
    p.add_argument("--background", type=int, default=16)
    p.add_argument("--levels", default="L0:L0,L2:L2,L3:L3",
                   help="comma-separated fg:bg test level pairs")

    p = sub.add_parser("train", help="train a model container on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--metrics", default=None, help="per-epoch CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("detect", help="run the detector over a split or one image")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--image", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-maps", default=None, metavar="DIR",
                   help="also write likelihood heatmap PNGs")
    _add_detect_flags(p)

    p = sub.add_parser("evaluate", help="score detection records against a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", default=None, help="report CSV path")

    p = sub.add_parser("check-grads", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=50)

    p = sub.add_parser("emit-maps", help="write center/corner heatmaps for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--no-occluder", action="store_true")
    return parser


def _cmd_gen_data(args) -> int:
    levels = []
    for pair in args.levels.split(","):
        fg, bg = pair.split(":")
        levels.append((fg.strip(), bg.strip()))
    datamod.generate_dataset(
        args.out, n_classes=args.classes, seed=args.seed, canvas=args.canvas,
        scale=args.object_scale, train_per_class=args.train_per_class,
        val_per_class=args.val_per_class, test_per_class=args.test_per_class,
        test_levels=levels, n_background=args.background,
    )
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    train(args.dataset, cfg, args.out, args.metrics)
    print(f"model written to {args.out}")
    return 0


def _detect_one(fmap, container, args):
    occ = None if args.no_occluder else container.occluder
    return detect(
        fmap, container.by_class(), container.dictionary, occ,
        t=args.threshold, nms_radius=args.nms_radius,
        search_window=args.search_window, omega=args.omega,
        box_mode=args.box_mode,
    )


def _emit_maps(fmap, container, out_dir, omega, occ):
    os.makedirs(out_dir, exist_ok=True)
    for (cid, corner), model in sorted(container.models.items()):
        rmap = scan_likelihood_map(fmap, model, container.dictionary, occ, omega)
        save_heatmap(rmap, os.path.join(out_dir, f"class{cid}_{corner}.png"))


def _cmd_detect(args) -> int:
    container = load_container(args.model)
    records = {}
    if args.image:
        image_id = os.path.splitext(os.path.basename(args.image))[0]
        fmap = extract_features(load_image(args.image), container.backbone)
        records[image_id] = _detect_one(fmap, container, args)
        if args.emit_maps:
            occ = None if args.no_occluder else container.occluder
            _emit_maps(fmap, container, args.emit_maps, args.omega, occ)
    elif args.dataset:
        manifest = datamod.load_dataset(args.dataset)
        if args.split not in manifest:
            raise DataError(f"dataset has no split {args.split!r}")
        for rec in manifest[args.split]:
            image = load_image(os.path.join(args.dataset, rec.path))
            fmap = extract_features(image, container.backbone)
            records[rec.image_id] = _detect_one(fmap, container, args)
            if args.emit_maps:
                occ = None if args.no_occluder else container.occluder
                _emit_maps(fmap, container,
                           os.path.join(args.emit_maps, rec.image_id),
                           args.omega, occ)
    else:
        raise DataError("detect needs --image or --dataset")
    write_detections(args.out, records)
    print(f"{sum(len(v) for v in records.values())} detections written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    manifest = datamod.load_dataset(args.dataset)
    if args.split not in manifest:
        raise DataError(f"dataset has no split {args.split!r}")
    detections = read_detections(args.detections)
    report = evaluate(manifest[args.split], detections)
    print(report.table())
    if args.out:
        report.to_csv(args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_check_grads(args) -> int:
    results = grad_check_suite(seed=args.seed, samples_per_loss=args.samples)
    worst = 0.0
    for name, res in results.items():
        print(f"{name}: max rel. error {res['max_rel_error']:.3e} "
              f"({res['checked']} checked, {res['excluded']} tie-excluded)")
        worst = max(worst, res["max_rel_error"])
    print(f"overall max rel. error {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if worst < GRAD_TOLERANCE else 1


def _cmd_emit_maps(args) -> int:
    container = load_container(args.model)
    fmap = extract_features(load_image(args.image), container.backbone)
    occ = None if args.no_occluder else container.occluder
    _emit_maps(fmap, container, args.out, args.omega, occ)
    n = len(container.models)
    print(f"{n} heatmaps written to {args.out}")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "evaluate": _cmd_evaluate,
    "check-grads": _cmd_check_grads,
    "emit-maps": _cmd_emit_maps,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CompdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
