"""Command-line interface.

Subcommands::

    synth            render synthetic triplets and write a manifest
    register         register one triplet and print the pose trace and E
    eval             cumulative accuracy, confusion matrix and saliency CSVs
    train-head       train the feature/saliency head on a manifest
    saliency-report  relative saliency weights of a feature provider

Exit status: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .errors import NumericalError, RelocError, ValidationError
from .evalharness import (
    DEFAULT_THRESHOLDS,
    confusion_matrix,
    cumulative_accuracy,
    evaluate_all,
    handcrafted_provider,
    HeadProvider,
    relative_saliency_weights,
    saliency_report,
    write_curve_csv,
    write_matrix_csv,
    write_records_csv,
    write_saliency_csv,
)
from .features import TrainConfig, TrainingSample, train_head
from .io import (
    TripletManifest,
    config_template,
    load_config,
    load_manifest,
    load_triplet,
    read_checkpoint,
    save_manifest,
    write_triplet,
)
from .liegroup import compose, inverse, se3_log
from .losses import relative_pose_error
from .registration import RegistrationConfig, register
from .synthscene import CLASS_NAMES, SceneConfig, make_dataset

log = logging.getLogger("tcreloc")

MANIFEST_NAME = "manifest.jsonl"
CONFIG_TYPES = {"scene": SceneConfig, "train": TrainConfig, "registration": RegistrationConfig}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _provider(spec: str):
    if spec == "handcrafted":
        return handcrafted_provider
    if spec.startswith("head:"):
        params, _ = read_checkpoint(spec[5:])
        return HeadProvider(params)
    raise ValidationError(f"unknown feature provider {spec!r}; use handcrafted or head:CKPT")


def _triplets(manifest: TripletManifest):
    return [load_triplet(manifest, e) for e in manifest.entries]


def cmd_synth(args) -> int:
    cfg = load_config(args.config, SceneConfig)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    os.makedirs(args.out, exist_ok=True)
    entries = [write_triplet(args.out, t) for t in make_dataset(cfg, args.count, args.start)]
    save_manifest(os.path.join(args.out, MANIFEST_NAME), TripletManifest(entries, args.out))
    print(f"wrote {len(entries)} triplets to {args.out}")
    return 0


def cmd_register(args) -> int:
    manifest = load_manifest(args.manifest)
    entry = manifest.find(args.triplet)
    triplet = load_triplet(manifest, entry)
    cfg = load_config(args.config, RegistrationConfig)
    r0, r1, q = _provider(args.features)(triplet)
    res0 = register(r0, q, cfg)
    res1 = register(r1, q, cfg)
    print("level iteration cost valid tx ty tz wx wy wz")
    for e in res0.trace:
        xi = se3_log(e.pose)
        print(f"{e.level} {e.iteration} {e.cost!r} {e.valid} " + " ".join(repr(float(x)) for x in xi))
    print("T_q_r0 = " + " ".join(repr(float(x)) for x in res0.final_pose.matrix().ravel()))
    print("T_q_r1 = " + " ".join(repr(float(x)) for x in res1.final_pose.matrix().ravel()))
    print(f"E = {relative_pose_error(res0.final_pose, res1.final_pose, triplet.that_r0_r1)!r}")
    if entry.gt_q_r0 is not None:
        diff = compose(inverse(entry.gt_q_r0), res0.final_pose)
        print(f"translation error vs ground truth = {float(np.linalg.norm(diff.translation))!r}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    triplets = _triplets(manifest)
    cfg = load_config(args.config, RegistrationConfig)
    provider = _provider(args.features)
    has_gt = all(e.gt_q_r0 is not None for e in manifest.entries)
    records = evaluate_all(triplets, provider, cfg, args.workers, has_gt)
    os.makedirs(args.out, exist_ok=True)
    write_records_csv(os.path.join(args.out, "records.csv"), records)
    if records:
        fractions = cumulative_accuracy([r.error for r in records], DEFAULT_THRESHOLDS)
        write_curve_csv(os.path.join(args.out, "cumulative_accuracy.csv"), DEFAULT_THRESHOLDS, fractions)
    else:
        write_curve_csv(os.path.join(args.out, "cumulative_accuracy.csv"), [], [])
    write_matrix_csv(os.path.join(args.out, "confusion_matrix.csv"), confusion_matrix(records))
    _write_saliency(triplets, provider, os.path.join(args.out, "saliency_report.csv"))
    failed = sum(r.failed for r in records)
    print(f"evaluated {len(records)} triplets ({failed} failed); CSVs in {args.out}")
    return 0


def _write_saliency(triplets, provider, path: str) -> None:
    per_image = []
    for t in triplets:
        r0, _, _ = provider(t)
        per_image.append(relative_saliency_weights([lvl.saliency for lvl in r0.levels], t.r0.segmentation))
    stats = saliency_report(per_image) if per_image else []
    write_saliency_csv(path, stats, CLASS_NAMES)


def cmd_train_head(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = load_config(args.config, TrainConfig)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.gradient is not None:
        cfg = dataclasses.replace(cfg, gradient=args.gradient)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if not manifest.entries:
        raise ValidationError("cannot train on an empty manifest")
    samples = [TrainingSample(t) for t in _triplets(manifest)]
    result = train_head(samples, cfg, args.out)
    for i, loss in enumerate(result.epoch_loss, start=1):
        print(f"epoch {i}: mean loss {loss!r}")
    print(f"checkpoint written to {os.path.join(args.out, 'head.ckpt')}")
    return 0


def cmd_saliency_report(args) -> int:
    manifest = load_manifest(args.manifest)
    triplets = _triplets(manifest)
    _write_saliency(triplets, _provider(args.features), args.out)
    print(f"saliency report written to {args.out}")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(config_template(CONFIG_TYPES[args.kind]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcreloc", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic triplets")
    p.add_argument("--config", help="scene config (key = value); default 640x384")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--start", type=int, default=0, help="index of the first triplet")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register one triplet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--triplet", required=True, help="triplet id")
    p.add_argument("--features", default="handcrafted", help="handcrafted or head:CKPT")
    p.add_argument("--config", help="registration config (key = value)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluate a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted", help="handcrafted or head:CKPT")
    p.add_argument("--config", help="registration config (key = value)")
    p.add_argument("--out", default="eval", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-head", help="train the feature/saliency head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="training config (key = value)")
    p.add_argument("--out", required=True, help="checkpoint and log directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gradient", choices=("fd", "adjoint"))
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("saliency-report", help="relative saliency weights per class and level")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default="handcrafted", help="handcrafted or head:CKPT")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_saliency_report)

    p = sub.add_parser("config", help="print every key of a config file with its default")
    p.add_argument("kind", choices=sorted(CONFIG_TYPES))
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RelocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
