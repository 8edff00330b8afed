"""Command line driver: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .allocation import (allocation_objective, conv_shapes, erk_allocate,
                         greedy_allocate, lamp_allocate, projection_forced_erk,
                         score_tables)
from .container import (load_batches, load_labels, load_masks, load_network,
                        save_batches, save_labels, save_masks, save_network)
from .diagnostics import DEFAULT_GRID, CurveBuilder, DiagnosticCurves
from .harness import (DEFAULT_TARGETS, RULES, ExperimentConfig, calib_sensitivity,
                      evaluate_topk, run_sweep)
from .masking import (allocation_from_masks, global_magnitude_mask,
                      global_sparsity, masks_from_allocation, prunable_counts)
from .repair import EPSILON, RepairConfig, cr_bn
from .toynet import gen_batches, gen_labels, gen_toynet
from .transition import (ALPHA_BROAD, ALPHA_CORE, S_HIGH, S_LOW,
                         compute_cts_profile)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _repair_cfg(args: argparse.Namespace) -> RepairConfig:
    return RepairConfig(epsilon=args.epsilon, bn_batches=args.bn_batches,
                        bn_batch_size=args.bn_batch_size,
                        bn_momentum=args.bn_momentum, tau_override=args.tau,
                        scale_bias=not args.no_bias_scale)


def _add_repair_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bn-batches", type=int, default=20)
    p.add_argument("--bn-batch-size", type=int, default=128)
    p.add_argument("--bn-momentum", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=None,
                   help="override the per-layer median damping constant")
    p.add_argument("--no-bias-scale", action="store_true",
                   help="leave conv biases untouched by the channel scales")


def _timed(label: str, fn):
    t0 = time.perf_counter()
    out = fn()
    print(f"[{label}] {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return out


def cmd_gen_toynet(args) -> int:
    if args.eval_out and not args.labels_out:
        print("--eval-out needs --labels-out", file=sys.stderr)
        return 2
    net = gen_toynet(args.seed, blocks=args.blocks, channels=args.channels,
                     with_projections=not args.no_projections,
                     input_shape=tuple(int(d) for d in args.input_shape.split(",")),
                     classes=args.classes)
    save_network(args.out, net)
    print(f"wrote {args.out} ({len(net.nodes)} nodes, "
          f"{len(net.prunable)} prunable convs)")
    if args.calib_out:
        batches = gen_batches(args.seed + 1, args.calib_images, args.calib_batch,
                              net.input_shape)
        save_batches(args.calib_out, batches, meta={"seed": args.seed + 1})
        print(f"wrote {args.calib_out} ({args.calib_images} images)")
    if args.eval_out:
        batches = gen_batches(args.seed + 2, args.eval_images, args.calib_batch,
                              net.input_shape)
        save_batches(args.eval_out, batches, meta={"seed": args.seed + 2})
        labels = gen_labels(args.seed + 3, args.eval_images, args.classes)
        save_labels(args.labels_out, labels)
        print(f"wrote {args.eval_out} and {args.labels_out}")
    return 0


def cmd_diagnose(args) -> int:
    net = load_network(args.model)
    calib, _ = load_batches(args.calib)
    builder = CurveBuilder(net, calib, _repair_cfg(args),
                           layers=args.layers.split(",") if args.layers else None,
                           tap_post_bn=args.tap_post_bn)
    curves = _timed("diagnose", lambda: builder.build(args.grid))
    curves.save(args.out)
    print(f"wrote {args.out} ({len(curves.points)} points, "
          f"calib {curves.calib_id[:12]})")
    return 0


def cmd_allocate(args) -> int:
    net = load_network(args.model)
    counts = prunable_counts(net)
    masks = None
    if args.rule in ("raw_shift", "repair_residual", "rr"):
        if not args.curves:
            print("diagnostic rules need --curves", file=sys.stderr)
            return 2
        curves = DiagnosticCurves.load(args.curves)
        table = score_tables(curves)[args.rule]
        alloc, _ = greedy_allocate(table, counts, args.target_s)
    elif args.rule == "uniform":
        alloc = {l: args.target_s for l in net.prunable}
    elif args.rule == "erk":
        alloc = erk_allocate(conv_shapes(net), counts, args.target_s,
                             cap=args.cap, floor=args.floor).allocation()
    elif args.rule == "projection_forced":
        proj = [l for l in net.prunable if "downsample" in l]
        if not proj:
            raise ValueError("projection_forced needs projection layers")
        res = projection_forced_erk(conv_shapes(net), counts, proj,
                                    args.proj_s, args.target_s,
                                    cap=args.cap, floor=args.floor)
        alloc = res.allocation
        print(f"implied regular-conv sparsity "
              f"{100 * res.implied_regular_sparsity:.2f}%")
    elif args.rule == "global":
        masks = global_magnitude_mask(net, args.target_s)
        alloc = allocation_from_masks(masks)
    elif args.rule == "lamp":
        masks = lamp_allocate(net, args.target_s)
        alloc = allocation_from_masks(masks)
    else:
        print(f"unknown rule {args.rule}", file=sys.stderr)
        return 2
    with open(args.out, "w") as f:
        json.dump({l: alloc[l] for l in sorted(alloc)}, f, indent=1)
        f.write("\n")
    achieved = global_sparsity(alloc, counts)
    print(f"wrote {args.out} (achieved global sparsity {achieved:.6f})")
    if args.masks_out:
        if masks is None:
            masks = masks_from_allocation(net, alloc)
        save_masks(args.masks_out, masks)
        print(f"wrote {args.masks_out}")
    return 0


def cmd_repair(args) -> int:
    net = load_network(args.model)
    calib, _ = load_batches(args.calib)
    if args.masks:
        masks = load_masks(args.masks)
    elif args.allocation:
        with open(args.allocation) as f:
            masks = masks_from_allocation(net, json.load(f))
    else:
        print("need --allocation or --masks", file=sys.stderr)
        return 2
    cfg = _repair_cfg(args)
    repaired, scales = _timed("repair", lambda: cr_bn(net, masks, calib, cfg))
    save_network(args.out, repaired)
    print(f"wrote {args.out}")
    if args.dump_scales:
        with open(args.dump_scales, "w") as f:
            json.dump({l: s.to_json() for l, s in sorted(scales.items())},
                      f, indent=1, sort_keys=True)
            f.write("\n")
        print(f"wrote {args.dump_scales}")
    return 0


def cmd_evaluate(args) -> int:
    net = load_network(args.model)
    batches, _ = load_batches(args.data)
    labels = load_labels(args.labels)
    acc = _timed("evaluate", lambda: evaluate_topk(net, batches, labels, args.topk))
    print(f"top-{args.topk}: {acc:.6f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    if args.epsilon is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "epsilon": args.epsilon})
    if args.grid is not None:
        cfg.grid = tuple(_floats(args.grid))
    result = run_sweep(cfg)
    print(f"wrote {result.csv_path} ({len(result.rows)} rows)")
    if result.transition_inputs_path:
        print(f"wrote {result.transition_inputs_path}")
    return 0


def cmd_detect_transition(args) -> int:
    with open(args.input) as f:
        doc = json.load(f)
    prefix_dir = os.path.dirname(args.out_prefix)
    if prefix_dir:
        os.makedirs(prefix_dir, exist_ok=True)
    targets = doc["targets"]
    summary = {}
    for seed, series in sorted(doc["seeds"].items()):
        profile = compute_cts_profile(targets, series["j_rr"], series["j_erk"],
                                      s_low=args.s_low, s_high=args.s_high,
                                      alpha=args.alpha, alpha_broad=args.alpha_broad,
                                      epsilon=args.epsilon)
        profile.save(f"{args.out_prefix}_seed{seed}.json")
        profile.write_csv(f"{args.out_prefix}_seed{seed}.csv")
        core = (f"{profile.core.s_start:g}..{profile.core.s_end:g}"
                if profile.core else "not detected")
        broad = (f"{profile.broad.s_start:g}..{profile.broad.s_end:g}"
                 if profile.broad else "not detected")
        summary[seed] = {"core": core, "broad": broad}
        print(f"seed {seed}: core {core}, broad {broad}")
    with open(f"{args.out_prefix}_summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return 0


def cmd_erk_diagnostic(args) -> int:
    net = load_network(args.model)
    res = erk_allocate(conv_shapes(net), prunable_counts(net), args.target_s,
                       cap=args.cap, floor=args.floor)
    widths = max(len(l) for l in res.layers)
    print(f"{'layer':<{widths}}  {'n':>10}  {'raw':>10}  {'uncapped':>9}  "
          f"{'density':>8}  {'sparsity':>8}")
    counts = prunable_counts(net)
    for l in res.layers:
        print(f"{l:<{widths}}  {counts[l]:>10}  {res.raw_score[l]:>10.6f}  "
              f"{res.uncapped_density[l]:>9.4f}  {res.density[l]:>8.4f}  "
              f"{1 - res.density[l]:>8.4f}")
    if res.capped:
        print(f"capped at {args.cap}: {', '.join(res.capped)}")
    if res.floored:
        print(f"floored at {args.floor}: {', '.join(res.floored)}")
    if args.csv:
        lines = ["layer,n,raw,uncapped_density,density,sparsity"]
        lines += [f"{l},{counts[l]},{repr(res.raw_score[l])},"
                  f"{repr(res.uncapped_density[l])},{repr(res.density[l])},"
                  f"{repr(1 - res.density[l])}" for l in res.layers]
        with open(args.csv, "w", newline="") as f:
            f.write("\n".join(lines) + "\n")
        print(f"wrote {args.csv}")
    return 0


def cmd_calib_sensitivity(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    rows = calib_sensitivity(cfg, [int(s) for s in args.sizes.split(",")])
    for r in rows:
        print(f"size {r['size']:>4}  target {r['target_S']:.4f}  "
              f"achieved {r['achieved_S']:.6f}  j_rr {r['j_rr']:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spnr",
                                 description="prune, repair, and diagnose small CNNs")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toynet", help="write a seeded toy residual net")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--no-projections", action="store_true")
    p.add_argument("--input-shape", default="3,8,8")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--calib-out")
    p.add_argument("--calib-images", type=int, default=128)
    p.add_argument("--calib-batch", type=int, default=64)
    p.add_argument("--eval-out")
    p.add_argument("--eval-images", type=int, default=256)
    p.add_argument("--labels-out")
    p.set_defaults(fn=cmd_gen_toynet)

    p = sub.add_parser("diagnose", help="build single-layer distortion curves")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=_floats, default=list(DEFAULT_GRID))
    p.add_argument("--epsilon", type=float, default=EPSILON)
    p.add_argument("--layers", help="comma list; default: all prunable")
    p.add_argument("--tap-post-bn", action="store_true")
    _add_repair_flags(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("allocate", help="turn a rule into per-layer sparsities")
    p.add_argument("--rule", required=True, choices=RULES)
    p.add_argument("--model", required=True)
    p.add_argument("--target-s", type=float, required=True)
    p.add_argument("--curves", help="curves JSON (diagnostic rules)")
    p.add_argument("--out", required=True)
    p.add_argument("--masks-out")
    p.add_argument("--proj-s", type=float, default=0.70)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--floor", type=float, default=0.025)
    p.set_defaults(fn=cmd_allocate)

    p = sub.add_parser("repair", help="mask, rescale channels, recalibrate BN")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--allocation")
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-scales")
    p.add_argument("--epsilon", type=float, default=EPSILON)
    _add_repair_flags(p)
    p.set_defaults(fn=cmd_repair)

    p = sub.add_parser("evaluate", help="top-k accuracy on labeled batches")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--topk", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="seeds x targets x rules experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("detect-transition", help="band detection over sweep objectives")
    p.add_argument("--input", required=True, help="transition_inputs.json from sweep")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--alpha", type=float, default=ALPHA_CORE)
    p.add_argument("--alpha-broad", type=float, default=ALPHA_BROAD)
    p.add_argument("--s-low", type=float, default=S_LOW)
    p.add_argument("--s-high", type=float, default=S_HIGH)
    p.add_argument("--epsilon", type=float, default=EPSILON)
    p.set_defaults(fn=cmd_detect_transition)

    p = sub.add_parser("erk-diagnostic", help="density split with cap/floor details")
    p.add_argument("--model", required=True)
    p.add_argument("--target-s", type=float, required=True)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--floor", type=float, default=0.025)
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_erk_diagnostic)

    p = sub.add_parser("calib-sensitivity", help="rerun rr on calibration prefixes")
    p.add_argument("--config", required=True)
    p.add_argument("--sizes", default="16,32,64,128")
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_calib_sensitivity)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        # domain validation (infeasible budgets, bad grids, calibration
        # mismatches) and missing inputs get one line, not a traceback
        print(f"spnr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
