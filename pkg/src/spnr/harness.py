"""Sweep driver: config, rule dispatch, CSV/JSON artifacts, evaluation.

Only this module ever touches label tensors (through ``evaluate_topk``);
diagnostics, repair, allocation, and transition code has no access to them.
"""
from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .allocation import (ErkResult, GreedyTrace, ScoreTable, allocation_objective,
                         conv_shapes, erk_allocate, greedy_allocate, lamp_allocate,
                         projection_forced_erk, score_tables, uniform_allocate)
from .container import load_batches, load_labels, load_network
from .diagnostics import DEFAULT_GRID, CurveBuilder, DiagnosticCurves
from .engine import NetworkSpec, forward
from .masking import (allocation_from_masks, global_magnitude_mask,
                      global_sparsity, masks_from_allocation, prunable_counts)
from .repair import EPSILON, RepairConfig, cr_bn

RULES = ("global", "uniform", "raw_shift", "repair_residual", "rr", "erk",
         "lamp", "projection_forced")
DIAGNOSTIC_RULES = ("raw_shift", "repair_residual", "rr")
DEFAULT_TARGETS = (0.90, 0.925, 0.95, 0.975)


@dataclass
class ExperimentConfig:
    model: str
    calib: str
    output_dir: str
    eval_data: str | None = None
    eval_labels: str | None = None
    grid: tuple[float, ...] = DEFAULT_GRID
    targets: tuple[float, ...] = DEFAULT_TARGETS
    rules: tuple[str, ...] = ("rr", "erk")
    seeds: tuple[int, ...] = (0,)
    epsilon: float = EPSILON
    calib_images: int = 128
    calib_batch: int = 64
    repair: RepairConfig = field(default_factory=RepairConfig)
    projection_sparsity: float = 0.70
    projection_layers: tuple[str, ...] | None = None
    record_j_rr: bool = True
    tap_post_bn: bool = False
    topk: int = 1

    def __post_init__(self) -> None:
        for r in self.rules:
            if r not in RULES:
                raise ValueError(f"unknown rule {r!r}; choose from {RULES}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.repair = replace(self.repair, epsilon=self.epsilon)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ExperimentConfig":
        doc = dict(doc)
        repair = RepairConfig(**doc.pop("repair", {}))
        known = {f for f in cls.__dataclass_fields__ if f != "repair"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("grid", "targets", "rules", "seeds", "projection_layers"):
            if key in doc and doc[key] is not None:
                doc[key] = tuple(doc[key])
        return cls(repair=repair, **doc)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class SweepRow:
    rule: str
    target_S: float
    achieved_S: float
    seed: int
    j_rr: float | None
    eval_metric: float | None

    def csv_values(self) -> list[str]:
        return [self.rule, repr(self.target_S), repr(self.achieved_S),
                str(self.seed),
                "" if self.j_rr is None else repr(self.j_rr),
                "" if self.eval_metric is None else repr(self.eval_metric)]


CSV_HEADER = ["rule", "target_S", "achieved_S", "seed", "j_rr", "eval_metric"]


class CurveCache:
    """Per-seed diagnostic curve store shared by every rule in a sweep."""

    def __init__(self) -> None:
        self.hits = 0
        self.misses = 0
        self._store: dict[int, tuple[CurveBuilder, DiagnosticCurves]] = {}

    def get_or_build(self, seed: int,
                     factory: Callable[[], tuple[CurveBuilder, DiagnosticCurves]],
                     ) -> tuple[CurveBuilder, DiagnosticCurves]:
        if seed in self._store:
            self.hits += 1
        else:
            self.misses += 1
            self._store[seed] = factory()
        return self._store[seed]

    def contains(self, seed: int) -> bool:
        return seed in self._store


def choose_calibration(pool_batches: Sequence[np.ndarray], seed: int,
                       images: int, batch_size: int,
                       ) -> tuple[list[np.ndarray], list[int]]:
    """Seed-derived image selection from the calibration pool.

    When the pool holds exactly the requested count the order is kept as-is;
    a larger pool is subsampled without replacement by the seed's generator.
    The chosen indices are returned for logging.
    """
    pool = np.concatenate([np.asarray(b) for b in pool_batches], axis=0)
    total = pool.shape[0]
    if total < images:
        raise ValueError(f"calibration pool has {total} images, need {images}")
    if total == images:
        idx = np.arange(total)
    else:
        idx = np.random.default_rng(seed).choice(total, size=images, replace=False)
    sel = pool[idx]
    batches = [np.ascontiguousarray(sel[i:i + batch_size], dtype=np.float32)
               for i in range(0, images, batch_size)]
    return batches, [int(i) for i in idx]


def evaluate_topk(net: NetworkSpec, batches: Sequence[np.ndarray],
                  labels: np.ndarray, k: int = 1) -> float:
    """Fraction of samples whose label lands in the top-k logits."""
    if k < 1:
        raise ValueError("k must be at least 1")
    total = sum(int(b.shape[0]) for b in batches)
    if labels.shape != (total,):
        raise ValueError(f"labels shape {labels.shape} does not cover {total} samples")
    hits = 0
    off = 0
    want = labels.astype(np.int64)
    for b in batches:
        logits, _ = forward(net, np.ascontiguousarray(b, dtype=np.float32))
        if k == 1:
            pred = logits.argmax(axis=1)
            hits += int((pred == want[off:off + b.shape[0]]).sum())
        else:
            topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
            hits += int((topk == want[off:off + b.shape[0], None]).any(axis=1).sum())
        off += b.shape[0]
    return hits / total


@dataclass
class RuleOutcome:
    allocation: dict[str, float]
    masks: dict[str, np.ndarray]
    trace: GreedyTrace | None = None
    erk: ErkResult | None = None


def realize_rule(rule: str, net: NetworkSpec, target: float,
                 cfg: ExperimentConfig,
                 table_lookup: Callable[[str], ScoreTable]) -> RuleOutcome:
    """Turn one (rule, target) pair into an allocation plus concrete masks."""
    counts = prunable_counts(net)
    if rule == "uniform":
        alloc = uniform_allocate(net.prunable, target)
    elif rule == "erk":
        res = erk_allocate(conv_shapes(net), counts, target)
        return RuleOutcome(res.allocation(), masks_from_allocation(net, res.allocation()),
                           erk=res)
    elif rule == "global":
        masks = global_magnitude_mask(net, target)
        return RuleOutcome(allocation_from_masks(masks), masks)
    elif rule == "lamp":
        masks = lamp_allocate(net, target)
        return RuleOutcome(allocation_from_masks(masks), masks)
    elif rule == "projection_forced":
        proj = (list(cfg.projection_layers) if cfg.projection_layers is not None
                else [l for l in net.prunable if "downsample" in l])
        if not proj:
            raise ValueError("projection_forced needs projection layers "
                             "(none named '*downsample*' and none configured)")
        res = projection_forced_erk(conv_shapes(net), counts, proj,
                                    cfg.projection_sparsity, target)
        return RuleOutcome(res.allocation, masks_from_allocation(net, res.allocation),
                           erk=res.regular)
    elif rule in DIAGNOSTIC_RULES:
        alloc, trace = greedy_allocate(table_lookup(rule), counts, target)
        return RuleOutcome(alloc, masks_from_allocation(net, alloc), trace=trace)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return RuleOutcome(alloc, masks_from_allocation(net, alloc))


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _dump_json(path: str, doc) -> None:
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class SweepResult:
    rows: list[SweepRow]
    csv_path: str
    curve_cache: CurveCache
    transition_inputs_path: str | None


def run_sweep(cfg: ExperimentConfig, log=None) -> SweepResult:
    """Seeds x targets x rules grid; deterministic artifacts under output_dir."""
    log = log or (lambda msg: print(msg, file=sys.stderr))
    os.makedirs(cfg.output_dir, exist_ok=True)
    net = load_network(cfg.model)
    pool, _ = load_batches(cfg.calib)
    counts = prunable_counts(net)
    eval_batches = labels = None
    if cfg.eval_data and cfg.eval_labels:
        eval_batches, _ = load_batches(cfg.eval_data)
        labels = load_labels(cfg.eval_labels)

    needs_curves = cfg.record_j_rr or any(r in DIAGNOSTIC_RULES for r in cfg.rules)
    cache = CurveCache()
    rows: list[SweepRow] = []
    transition: dict[str, dict[str, list[float]]] = {}

    for seed in cfg.seeds:
        t0 = time.perf_counter()
        calib, chosen = choose_calibration(pool, seed, cfg.calib_images, cfg.calib_batch)

        def build() -> tuple[CurveBuilder, DiagnosticCurves]:
            b = CurveBuilder(net, calib, cfg.repair, tap_post_bn=cfg.tap_post_bn)
            return b, b.build(cfg.grid)

        tables: dict[str, ScoreTable] = {}

        def table_lookup(source: str) -> ScoreTable:
            _, curves = cache.get_or_build(seed, build)
            if source not in tables:
                tables.update(score_tables(curves))
            return tables[source]

        per_rule_j: dict[str, list[float]] = {}
        for target in cfg.targets:
            for rule in cfg.rules:
                outcome = realize_rule(rule, net, target, cfg, table_lookup)
                achieved = global_sparsity(outcome.allocation, counts)
                j = None
                if needs_curves:
                    builder, curves = cache.get_or_build(seed, build)
                    builder.extend(curves, {l: [s] for l, s in outcome.allocation.items()})
                    j = allocation_objective(outcome.allocation, curves)
                    per_rule_j.setdefault(rule, []).append(j)
                repaired, _ = cr_bn(net, outcome.masks, calib, cfg.repair)
                metric = None
                if eval_batches is not None and labels is not None:
                    metric = evaluate_topk(repaired, eval_batches, labels, cfg.topk)
                rows.append(SweepRow(rule=rule, target_S=float(target),
                                     achieved_S=achieved, seed=seed,
                                     j_rr=j, eval_metric=metric))
                run_doc = {"rule": rule, "target_S": target, "seed": seed,
                           "achieved_S": achieved, "j_rr": j, "eval_metric": metric,
                           "allocation": {l: outcome.allocation[l]
                                          for l in sorted(outcome.allocation)},
                           "calib_indices": chosen}
                if outcome.trace is not None:
                    run_doc["trace"] = [list(step) for step in outcome.trace.steps]
                _dump_json(os.path.join(cfg.output_dir,
                                        f"run_s{seed}_t{target:g}_{rule}.json"), run_doc)
        if needs_curves and cache.contains(seed):
            _, curves = cache.get_or_build(seed, build)
            _dump_json(os.path.join(cfg.output_dir, f"curves_seed{seed}.json"),
                       curves.to_json())
        if {"rr", "erk"} <= set(per_rule_j):
            transition[str(seed)] = {"j_rr": per_rule_j["rr"],
                                     "j_erk": per_rule_j["erk"]}
        log(f"seed {seed}: {len(cfg.targets) * len(cfg.rules)} runs in "
            f"{time.perf_counter() - t0:.2f}s")

    lines = [",".join(CSV_HEADER)]
    lines += [",".join(r.csv_values()) for r in rows]
    csv_path = os.path.join(cfg.output_dir, "sweep.csv")
    _atomic_write(csv_path, "\n".join(lines) + "\n")

    tpath = None
    if transition:
        tpath = os.path.join(cfg.output_dir, "transition_inputs.json")
        _dump_json(tpath, {"targets": list(cfg.targets), "seeds": transition})
    return SweepResult(rows=rows, csv_path=csv_path, curve_cache=cache,
                       transition_inputs_path=tpath)


def calib_sensitivity(cfg: ExperimentConfig, sizes: Sequence[int],
                      log=None) -> list[dict]:
    """Rerun the repair-ratio pipeline on calibration prefixes of given sizes."""
    log = log or (lambda msg: print(msg, file=sys.stderr))
    os.makedirs(cfg.output_dir, exist_ok=True)
    net = load_network(cfg.model)
    pool_batches, _ = load_batches(cfg.calib)
    pool = np.concatenate([np.asarray(b) for b in pool_batches], axis=0)
    counts = prunable_counts(net)
    rows = []
    for size in sizes:
        if size < 1 or size > pool.shape[0]:
            raise ValueError(f"prefix size {size} outside pool of {pool.shape[0]}")
        bs = min(cfg.calib_batch, size)
        calib = [np.ascontiguousarray(pool[i:i + bs], dtype=np.float32)
                 for i in range(0, size, bs)]
        t0 = time.perf_counter()
        builder = CurveBuilder(net, calib, cfg.repair)
        curves = builder.build(cfg.grid)
        table = score_tables(curves)["rr"]
        for target in cfg.targets:
            alloc, _ = greedy_allocate(table, counts, target)
            rows.append({"size": size, "target_S": float(target),
                         "achieved_S": global_sparsity(alloc, counts),
                         "j_rr": allocation_objective(alloc, curves)})
        log(f"prefix {size}: curves plus {len(cfg.targets)} allocations in "
            f"{time.perf_counter() - t0:.2f}s")
    lines = [",".join(["size", "target_S", "achieved_S", "j_rr"])]
    lines += [",".join([str(r["size"]), repr(r["target_S"]),
                        repr(r["achieved_S"]), repr(r["j_rr"])]) for r in rows]
    _atomic_write(os.path.join(cfg.output_dir, "calib_sensitivity.csv"),
                  "\n".join(lines) + "\n")
    return rows
