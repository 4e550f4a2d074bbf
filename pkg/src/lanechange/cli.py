"""``lanechange`` command line: synth, train, eval, infer, bench, gbt-train, gbt-eval."""

from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import gbt, models
from .dataset import (
    DatasetError,
    ImuNormalizer,
    crop_image,
    load_frames,
    load_manifest,
    normalize_imu,
    read_ppm_u8,
)
from .models import CLASS_NAMES, CheckpointError, SpecError
from .synth import SynthConfig, generate_synthetic, summarize
from .trainer import EvalReport, TrainConfig, evaluate, network_classifier, train

log = logging.getLogger("lanechange")

REFERENCE_GPU_S = 0.0276


class CliError(Exception):
    pass


def normalizer_path(checkpoint) -> Path:
    """Fusion checkpoints keep their IMU normalizer in a sidecar CSV."""
    return Path(str(checkpoint) + ".imu.csv")


def _load_network(path, height=278, width=692):
    params = models.load_checkpoint(path)
    spec = models.infer_spec(params, height, width)
    normalizer = None
    if spec.variant == "fusion":
        side = normalizer_path(path)
        if not side.exists():
            raise CliError(f"fusion checkpoint {path} has no IMU normalizer at {side}")
        normalizer = ImuNormalizer.load(side)
    return spec, params, normalizer


def _print_counts(counts: dict[int, int]) -> None:
    print("label,class,count")
    for lab, name in zip((-1, 1, 0), CLASS_NAMES):
        print(f"{lab},{name},{counts[lab]}")


# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = SynthConfig(
        frames=args.frames,
        width=args.width,
        height=args.height,
        seed=args.seed,
        maneuver_rate=args.maneuver_rate,
        noise_level=args.noise_level,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    manifest = generate_synthetic(cfg, args.out)
    _print_counts(summarize(manifest))


def cmd_train(args) -> None:
    crop = (args.crop_top, args.crop_bottom)
    train_set = load_frames(load_manifest(args.manifest, "train"), crop)
    val_set = load_frames(load_manifest(args.val, "val"), crop) if args.val else None
    h, w = train_set.images.shape[-2:]
    spec = models.NetworkSpec(args.model, h, w, args.width_mult, args.groups)
    cfg = TrainConfig(
        batch_size=args.batch,
        max_iters=args.iters,
        val_interval=args.val_interval,
        select=args.select,
        seed=args.seed,
        lr=args.lr,
        log_path=args.log,
    )
    result = train(spec, train_set, cfg, val_set)
    models.save_checkpoint(result.params, args.checkpoint)
    if result.normalizer is not None:
        result.normalizer.save(normalizer_path(args.checkpoint))
    accs = [r.val_acc for r in result.log if r.val_acc is not None]
    print(f"parameters,{spec.parameter_count()}")
    print(f"best_iteration,{result.best_iteration}")
    if accs:
        best = next(r for r in result.log if r.iteration == result.best_iteration)
        print(f"final_val_accuracy,{100 * accs[-1]:.2f}")
        print(f"selected_val_accuracy,{100 * best.val_acc:.2f}")


def cmd_eval(args) -> None:
    crop = (args.crop_top, args.crop_bottom)
    frames = load_frames(load_manifest(args.manifest, "test"), crop)
    spec, params, normalizer = _load_network(args.checkpoint, *frames.images.shape[-2:])
    report = evaluate(network_classifier(spec, params, normalizer), frames)
    report.save(args.report)
    sys.stdout.write(report.to_csv())


def cmd_infer(args) -> None:
    img = read_ppm_u8(args.image)
    if (args.crop_top, args.crop_bottom) != (0, 0):
        img = crop_image(img, args.crop_top, args.crop_bottom)
    spec, params, normalizer = _load_network(args.checkpoint, *img.shape[-2:])
    imu = None
    if spec.variant == "fusion":
        if args.imu is None:
            raise CliError("fusion checkpoint needs --imu with 6 values")
        imu = normalize_imu(np.array(args.imu), normalizer).astype(np.float32)
    elif args.imu is not None:
        print("warning: image-only checkpoint; --imu ignored", file=sys.stderr)
    pred = models.forward(params, img.astype(np.float32) / 255, imu, spec=spec)
    print(f"label,{pred.label}")
    print(f"class,{CLASS_NAMES[pred.class_index]}")
    print("p_left,p_right,p_keep")
    print(",".join(f"{p:.6f}" for p in pred.probabilities))


def cmd_bench(args) -> None:
    manifest = load_manifest(args.manifest)
    if not manifest.records:
        raise CliError(f"{args.manifest}: no images to benchmark")
    if args.runs < 1 or args.warmup < 0:
        raise CliError("--runs must be >= 1 and --warmup >= 0")
    crop = (args.crop_top, args.crop_bottom)
    first = read_ppm_u8(manifest.records[0].image)
    if crop != (0, 0):
        first = crop_image(first, *crop)
    spec, params, normalizer = _load_network(args.checkpoint, *first.shape[-2:])

    def prepare(rec):
        img = read_ppm_u8(rec.image)
        if crop != (0, 0):
            img = crop_image(img, *crop)
        imu = None
        if spec.variant == "fusion":
            imu = normalize_imu(rec.imu, normalizer).astype(np.float32)
        return img.astype(np.float32) / np.float32(255), imu

    recs = manifest.records
    cache = [prepare(r) for r in recs[: args.warmup + args.runs]] if args.forward_only else None

    def one(i):
        x, imu = cache[i % len(cache)] if cache else prepare(recs[i % len(recs)])
        return models.forward(params, x, imu, spec=spec)

    for i in range(args.warmup):
        one(i)
    times = []
    for i in range(args.warmup, args.warmup + args.runs):
        t0 = time.perf_counter()
        one(i)
        times.append(time.perf_counter() - t0)
    mean = statistics.fmean(times)
    print("metric,value")
    print(f"model,{spec.variant}")
    print(f"runs,{len(times)}")
    print(f"scope,{'forward' if args.forward_only else 'end_to_end'}")
    print(f"mean_s_per_image,{mean:.6g}")
    print(f"median_s_per_image,{statistics.median(times):.6g}")
    print(f"p95_s_per_image,{float(np.percentile(times, 95)):.6g}")
    print(f"images_per_second,{1.0 / mean:.6g}")
    print(f"reference_s_per_image,{REFERENCE_GPU_S}")
    print("note,reference figure was measured on a GTX 1080 GPU and is hardware dependent")


def cmd_gbt_train(args) -> None:
    frames = load_manifest(args.manifest)
    X = np.stack([r.imu for r in frames.records])
    y = np.array([models.LABEL_TO_INDEX[r.label] for r in frames.records])
    cfg = gbt.GBTConfig(args.rounds, args.depth, args.eta, args.lam, args.gamma)
    ens = gbt.fit(X, y, cfg)
    gbt.save(ens, args.out)
    acc = float((ens.predict(X) == y).mean())
    print(f"rounds,{ens.rounds}")
    print(f"train_accuracy,{100 * acc:.2f}")


def cmd_gbt_eval(args) -> None:
    manifest = load_manifest(args.manifest)
    ens = gbt.load(args.model)
    X = np.stack([r.imu for r in manifest.records])
    y = np.array([models.LABEL_TO_INDEX[r.label] for r in manifest.records])
    report = EvalReport.from_predictions(y, ens.predict(X))
    report.save(args.report)
    sys.stdout.write(report.to_csv())


# ---------------------------------------------------------------------------


def _crop_flags(p):
    p.add_argument("--crop-top", type=int, default=0, help="rows removed from the top of each image")
    p.add_argument("--crop-bottom", type=int, default=0, help="rows removed from the bottom of each image")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lanechange", description="Lane-change behaviour classifiers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--maneuver-rate", type=float, default=0.25)
    p.add_argument("--noise-level", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the image-only or fusion network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val")
    p.add_argument("--model", choices=["image", "fusion"], default="image")
    p.add_argument("--width-mult", type=float, default=1.0)
    p.add_argument("--groups", type=int, default=6)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--val-interval", type=int, default=500)
    p.add_argument("--select", choices=["loss", "accuracy"], default="loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True)
    _crop_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a network checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    _crop_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--imu", type=float, nargs=6, metavar="V")
    _crop_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time single-image inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--forward-only", action="store_true", help="exclude decode and crop from the timing")
    _crop_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gbt-train", help="fit the IMU-only boosted-tree baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.set_defaults(func=cmd_gbt_train)

    p = sub.add_parser("gbt-eval", help="evaluate the boosted-tree baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_gbt_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CliError, DatasetError, CheckpointError, SpecError, gbt.ModelFormatError, ValueError, OSError) as exc:
        print(f"lanechange {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
