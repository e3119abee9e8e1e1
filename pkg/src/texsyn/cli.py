"""Command line front end: extract, train, synthesize, evaluate, attend.

Exit codes: 0 on success, 2 for bad input or settings, 3 when training
loses numerical footing.  All file outputs are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from datetime import datetime, timezone

import numpy as np
from PIL import Image

from . import __version__, metrics
from .attention import patch_grid, patch_pixels
from .descriptors import mth_feature_stack, mth_features, patch_stats
from .gan import (
    ConfigError,
    NumericalError,
    TrainRunConfig,
    discriminate,
    format_metric_rows,
    generate,
    load_checkpoint,
    reference_stats,
    sample_latents,
    save_checkpoint,
    train,
)
from .tensor import DomainError, ShapeError, Tensor


# ---------------------------------------------------------------------------
# file helpers


def _atomic_binary(path, writer):
    """Write via a temp file and rename, so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            writer(handle)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _atomic_text(path, text):
    _atomic_binary(path, lambda handle: handle.write(text.encode("utf-8")))


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_image(path):
    """Read a PNG (or similar) as float64 (H, W, C) in [0, 1] with C of 1 or 3."""
    with Image.open(path) as img:
        if img.mode == "L":
            array = np.asarray(img, dtype=np.float64)[:, :, None]
        else:
            if img.mode != "RGB":
                img = img.convert("RGB")
            array = np.asarray(img, dtype=np.float64)
    return array / 255.0


def save_image(path, array):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] not in (1, 3):
        raise ShapeError(f"expected an (H, W, 1) or (H, W, 3) image, got {array.shape}")
    pixels = np.rint(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        img = Image.fromarray(pixels[:, :, 0], mode="L")
    else:
        img = Image.fromarray(pixels, mode="RGB")
    _atomic_binary(path, lambda handle: img.save(handle, format="PNG"))


# ---------------------------------------------------------------------------
# subcommands


def _load_config(args):
    data = {}
    if getattr(args, "config", None):
        with open(args.config) as handle:
            data = json.load(handle)
    cfg = TrainRunConfig.from_dict(data)
    overrides = {}
    for name in ("seed", "steps", "descriptor"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


def _check_grid(grid):
    if min(grid) < 1:
        raise ValueError(f"grid sides must be positive, got {grid[0]} {grid[1]}")
    return tuple(grid)


def cmd_extract(args):
    image = load_image(args.image)
    pixels = patch_pixels(Tensor(image), args.patch, args.overlap)
    grid = patch_grid(image.shape[0], image.shape[1], args.patch, args.overlap)
    if args.descriptor == "musigma":
        stats = patch_stats(pixels.mean(axis=3))
        arrays = {"mean_maps": stats.mean_map.data.tolist(),
                  "var_maps": stats.var_map.data.tolist()}
    else:
        arrays = {"features": mth_feature_stack(
            pixels.data, threshold=args.threshold,
            count_mode=args.count_mode).tolist()}
    histogram = mth_features(image, threshold=args.threshold,
                             count_mode=args.count_mode).combined
    payload = {
        "command": "extract",
        "version": __version__,
        "image": str(args.image),
        "image_sha256": _sha256(args.image),
        "patch": args.patch,
        "overlap": args.overlap,
        "grid": list(grid),
        "descriptor": args.descriptor,
        "histogram": histogram.tolist(),
        **arrays,
    }
    _atomic_text(args.out, json.dumps(payload, sort_keys=True) + "\n")
    print(f"extracted {grid[0] * grid[1]} patch descriptors -> {args.out}")
    return 0


def _print_row(row):
    text = f"step {row['step']} loss_d {row['loss_d']:.6f} loss_g {row['loss_g']:.6f}"
    if row["ssim"] is not None:
        text += f" ssim {row['ssim']:.4f} dfrechet {row['dfrechet']:.4f}"
    print(text)


def _utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_train(args):
    exemplar = load_image(args.exemplar)
    cfg = _load_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.json")
    manifest = {
        "command": "train",
        "version": __version__,
        "seed": cfg.seed,
        "exemplar": str(args.exemplar),
        "exemplar_sha256": _sha256(args.exemplar),
        "config": cfg.to_dict(),
        "resumed_from": str(args.resume) if args.resume else None,
        "outputs": {"metrics": "metrics.csv", "checkpoint": "checkpoint.npz"},
        "started": _utc_now(),
        "finished": None,
    }
    _atomic_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result = train(exemplar, cfg, resume=resume,
                   on_row=_print_row if args.verbose else None)
    _atomic_text(os.path.join(args.out, "metrics.csv"), format_metric_rows(result.rows))
    _atomic_binary(os.path.join(args.out, "checkpoint.npz"),
                   lambda handle: save_checkpoint(handle, result))
    manifest["finished"] = _utc_now()
    _atomic_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained to step {result.step} -> {args.out}")
    return 0


def cmd_synthesize(args):
    bundle = load_checkpoint(args.checkpoint)
    grid = _check_grid(args.grid) if args.grid else bundle.generator.base
    rng = np.random.default_rng(args.seed)
    latents = sample_latents(rng, grid[0] * grid[1], bundle.config)
    image = generate(bundle.generator, latents, grid=grid)
    save_image(args.out, image.data)
    print(f"synthesized {image.shape[0]}x{image.shape[1]} image -> {args.out}")
    return 0


def cmd_evaluate(args):
    bundle = load_checkpoint(args.checkpoint)
    exemplar = load_image(args.exemplar)
    samples = args.samples if args.samples is not None else bundle.config.eval_samples
    if samples < 2:
        raise ConfigError([f"samples must be at least 2, got {samples}"])
    report = metrics.evaluate(exemplar, bundle.generator, bundle.config,
                              np.random.default_rng(args.seed), samples=samples)
    payload = {
        "command": "evaluate",
        "version": __version__,
        "checkpoint": str(args.checkpoint),
        "exemplar": str(args.exemplar),
        "exemplar_sha256": _sha256(args.exemplar),
        "seed": args.seed,
        "samples": report.samples,
        "ssim_best": report.ssim_best,
        "ssim_all": report.ssim_all,
        "descriptor_frechet": report.descriptor_frechet,
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_text(args.out, text)
    print(text, end="")
    return 0


def cmd_attend(args):
    bundle = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    cfg = bundle.config
    reference = None
    if cfg.descriptor == "musigma":
        ref_image = load_image(args.reference) if args.reference else image
        reference = reference_stats(ref_image, cfg.patch_size, cfg.overlap)
    sink = []
    discriminate(bundle.discriminator, image, cfg,
                 reference=reference, weights_sink=sink)
    lines = ["block,head,query,key,score,weight"]
    for i, entry in enumerate(sink):
        block = i // cfg.heads
        scores, weights = entry["scores"], entry["weights"]
        for q in range(weights.shape[0]):
            for k in range(weights.shape[1]):
                lines.append(
                    f"{block},{entry['head']},{q},{k},"
                    f"{format(scores[q, k], '.12g')},{format(weights[q, k], '.12g')}")
    _atomic_text(args.out, "\n".join(lines) + "\n")
    print(f"attention matrices for {len(sink)} head passes -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="texsyn",
        description="Train and run attention-based texture synthesis models.")
    parser.add_argument("--version", action="version", version=f"texsyn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write patch descriptors for an image")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output .json path")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--descriptor", choices=("musigma", "texton"), default="musigma")
    p.add_argument("--threshold", type=float, default=0.05,
                   help="edge magnitude below this counts as no edge")
    p.add_argument("--count-mode", choices=("per_texton", "per_window"),
                   default="per_texton")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit a model to one exemplar image")
    p.add_argument("exemplar")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--descriptor", choices=("musigma", "texton", "none"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="sample an image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .png path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"),
                   help="token grid; defaults to the training grid")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score a checkpoint against an exemplar")
    p.add_argument("exemplar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report .json path; prints to stdout if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attend", help="dump discriminator attention matrices as CSV")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output .csv path")
    p.add_argument("--reference", help="reference image for mean/variance gaps"
                                       " (defaults to the input image)")
    p.set_defaults(func=cmd_attend)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ValueError, ShapeError, DomainError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
