"""Command line entry points: export-model and export-batches."""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .export import (IMAGENET_MEAN, IMAGENET_STD, export_batches, export_labels,
                     export_model)
from .graphs import ARCHS, ExportError


def _floats3(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"need 3 comma-separated values, got {text!r}")
    return vals


def main_model(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="export-model",
        description="convert a torchvision checkpoint to an SPNR model container")
    ap.add_argument("--arch", required=True, choices=ARCHS)
    ap.add_argument("--ckpt", required=True, help="torch checkpoint (state dict)")
    ap.add_argument("--out", required=True)
    ap.add_argument("--input-size", type=int, default=32,
                    help="recorded input resolution (default 32)")
    ap.add_argument("--mean", type=_floats3, default=IMAGENET_MEAN,
                    help="per-channel normalization mean recorded in the manifest")
    ap.add_argument("--std", type=_floats3, default=IMAGENET_STD)
    args = ap.parse_args(argv)
    try:
        manifest = export_model(args.ckpt, args.arch, args.out,
                                input_size=args.input_size,
                                mean=args.mean, std=args.std)
    except (ExportError, FileNotFoundError) as exc:
        print(f"export-model: error: {exc}", file=sys.stderr)
        return 1
    head = " (folded classifier head)" if manifest.folded_head else ""
    print(f"wrote {args.out} ({args.arch} at {args.input_size}x{args.input_size}, "
          f"checkpoint {manifest.checkpoint_sha256[:12]}{head})")
    return 0


def main_batches(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="export-batches",
        description="normalize an image array (.npy) into an SPNR batch container")
    ap.add_argument("--images", required=True,
                    help=".npy array, [N,3,H,W] or [N,H,W,3], uint8 or float")
    ap.add_argument("--out", required=True)
    ap.add_argument("--batch-size", type=int, default=64)
    ap.add_argument("--mean", type=_floats3, default=IMAGENET_MEAN)
    ap.add_argument("--std", type=_floats3, default=IMAGENET_STD)
    ap.add_argument("--labels", help=".npy class labels, exported separately")
    ap.add_argument("--labels-out")
    args = ap.parse_args(argv)
    if args.labels and not args.labels_out:
        print("--labels needs --labels-out", file=sys.stderr)
        return 2
    try:
        images = np.load(args.images)
        n = export_batches(images, args.out, batch_size=args.batch_size,
                           mean=args.mean, std=args.std,
                           source=args.images)
        if args.labels:
            export_labels(np.load(args.labels), args.labels_out)
    except (ExportError, FileNotFoundError) as exc:
        print(f"export-batches: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} ({images.shape[0]} images in {n} batches)")
    if args.labels:
        print(f"wrote {args.labels_out}")
    return 0
