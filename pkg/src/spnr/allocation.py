"""Layerwise sparsity allocation rules over a shared candidate grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diagnostics import DiagnosticCurves
from .engine import Conv2d, NetworkSpec


class InfeasibleBudgetError(ValueError):
    """The requested global sparsity cannot be met by any grid allocation."""


@dataclass
class ScoreTable:
    """Per-layer objective values aligned to a sparsity grid.

    ``scores[layer][k]`` is the cost of running ``layer`` at ``grid[k]``.
    ``source`` records which diagnostic produced the table; every table goes
    through the same solver regardless of source.
    """
    source: str
    grid: list[float]
    scores: dict[str, list[float]]

    def __post_init__(self) -> None:
        k = len(self.grid)
        for layer, vals in self.scores.items():
            if len(vals) != k:
                raise ValueError(f"layer {layer!r} has {len(vals)} scores for a "
                                 f"{k}-point grid")

    @property
    def layers(self) -> list[str]:
        return list(self.scores)


def score_tables(curves: DiagnosticCurves) -> dict[str, ScoreTable]:
    """The three diagnostic score tables projected out of one curve set."""
    tables = {}
    for source, attr in (("raw_shift", "d_raw"), ("repair_residual", "d_repair"),
                         ("rr", "rr")):
        scores = {l: [getattr(curves.point(l, s), attr) for s in curves.grid]
                  for l in curves.layers}
        tables[source] = ScoreTable(source=source, grid=list(curves.grid), scores=scores)
    return tables


@dataclass
class GreedyTrace:
    steps: list[tuple[str, float, float]]  # (layer, new sparsity, marginal rate)


def greedy_allocate(table: ScoreTable, counts: Mapping[str, int], S: float,
                    ) -> tuple[dict[str, float], GreedyTrace]:
    """Marginal-cost greedy promotion until the budget is met.

    Every layer starts at the lowest grid value. Each step promotes the layer
    whose next grid step costs least per newly pruned parameter (ties go to
    the earliest layer in table order); negative marginal costs are taken
    like any others. Stops at the first allocation whose parameter-weighted
    sparsity reaches ``S``; raises if the grid tops out first.
    """
    if not 0.0 < S <= 1.0:
        raise ValueError(f"target sparsity {S} outside (0, 1]")
    grid = table.grid
    layers = table.layers
    if not layers:
        raise ValueError("empty score table")
    missing = [l for l in layers if l not in counts]
    if missing:
        raise ValueError(f"no parameter counts for layers: {missing}")
    total = sum(counts[l] for l in layers)
    top = len(grid) - 1
    k = {l: 0 for l in layers}
    trace = GreedyTrace(steps=[])

    def achieved() -> float:
        return sum(counts[l] * grid[k[l]] for l in layers) / total

    # absolute slack so a budget sitting exactly on the grid maximum is
    # feasible despite summation rounding
    while achieved() < S - 1e-12:
        best: tuple[float, int] | None = None
        for idx, l in enumerate(layers):
            if k[l] >= top:
                continue
            step = k[l]
            dg = table.scores[l][step + 1] - table.scores[l][step]
            ds = grid[step + 1] - grid[step]
            rate = dg / (ds * counts[l])
            if best is None or (rate, idx) < best:
                best = (rate, idx)
        if best is None:
            raise InfeasibleBudgetError(
                f"grid maximum {grid[top]} cannot reach global sparsity {S}")
        rate, idx = best
        layer = layers[idx]
        k[layer] += 1
        trace.steps.append((layer, grid[k[layer]], rate))
    return {l: grid[k[l]] for l in layers}, trace


@dataclass
class ErkResult:
    """Density assignment where a layer's share scales with its shape sum.

    ``uncapped_density`` is the final redistribution scale times the raw
    shape score for every layer, including those pinned at the cap; it is
    the diagnostic column showing how much the cap actually bit.
    """
    layers: list[str]
    raw_score: dict[str, float]
    scale: float
    uncapped_density: dict[str, float]
    density: dict[str, float]
    capped: list[str]
    floored: list[str]

    @property
    def sparsity(self) -> dict[str, float]:
        return {l: 1.0 - d for l, d in self.density.items()}

    def allocation(self) -> dict[str, float]:
        return self.sparsity


def erk_allocate(shapes: Mapping[str, Sequence[int]], counts: Mapping[str, int],
                 S: float, cap: float = 1.0, floor: float = 0.025) -> ErkResult:
    """Shape-sum-over-size density split of a global parameter budget.

    The raw per-layer score is sum(dims)/prod(dims); a single scale spreads
    the keep budget across layers proportionally. Layers pushed past the cap
    (or under the floor) are pinned there and the scale is re-solved over the
    rest until no violations remain.
    """
    if not 0.0 < S < 1.0:
        raise ValueError(f"global sparsity {S} outside (0, 1)")
    if not 0.0 <= floor < cap <= 1.0:
        raise ValueError(f"need 0 <= floor < cap <= 1, got floor={floor} cap={cap}")
    layers = list(shapes)
    if not layers:
        raise ValueError("no layers to allocate")
    raw = {}
    for l in layers:
        dims = tuple(int(d) for d in shapes[l])
        if len(dims) != 4 or math.prod(dims) != counts[l]:
            raise ValueError(f"layer {l!r}: shape {dims} disagrees with count {counts[l]}")
        raw[l] = sum(dims) / math.prod(dims)
    total = sum(counts[l] for l in layers)
    budget = (1.0 - S) * total

    fixed: dict[str, float] = {}
    scale = 0.0
    for _ in range(len((layers)) + 1):
        free = [l for l in layers if l not in fixed]
        if not free:
            break
        rhs = budget - sum(fixed[l] * counts[l] for l in fixed)
        denom = sum(raw[l] * counts[l] for l in free)
        scale = rhs / denom
        over = [l for l in free if scale * raw[l] > cap]
        if over:
            for l in over:
                fixed[l] = cap
            continue
        under = [l for l in free if scale * raw[l] < floor]
        if under:
            for l in under:
                fixed[l] = floor
            continue
        break

    density = {l: fixed.get(l, scale * raw[l]) for l in layers}
    spent = sum(density[l] * counts[l] for l in layers)
    if not math.isclose(spent, budget, rel_tol=1e-9, abs_tol=1e-6):
        raise InfeasibleBudgetError(
            f"cap/floor constraints cannot meet sparsity {S}: "
            f"achievable keep fraction {spent / total:.6f}, wanted {(1 - S):.6f}")
    return ErkResult(
        layers=layers,
        raw_score=raw,
        scale=scale,
        uncapped_density={l: scale * raw[l] for l in layers},
        density=density,
        capped=[l for l in layers if fixed.get(l) == cap],
        floored=[l for l in layers if fixed.get(l) == floor],
    )


def uniform_allocate(layers: Sequence[str], S: float) -> dict[str, float]:
    if not 0.0 <= S <= 1.0:
        raise ValueError(f"sparsity {S} outside [0, 1]")
    return {l: float(S) for l in layers}


def lamp_scores(weight: np.ndarray) -> np.ndarray:
    """Per-weight score: squared magnitude over the suffix sum of squares.

    Weights are ranked ascending by |w| (stable, so equal magnitudes keep
    flat-index order); each weight's denominator sums the squares of all
    weights ranked at or above it. Scores are monotone in |w| within a layer,
    so pruning by score order reduces to magnitude order layer-locally.
    """
    flat = weight.astype(np.float64).ravel()
    order = np.argsort(np.abs(flat), kind="stable")
    sq = np.square(flat[order])
    suffix = np.cumsum(sq[::-1])[::-1]
    ranked = np.divide(sq, suffix, out=np.zeros_like(sq), where=suffix > 0)
    scores = np.empty_like(ranked)
    scores[order] = ranked
    return scores.reshape(weight.shape)


def lamp_allocate(net: NetworkSpec, S: float) -> dict[str, np.ndarray]:
    """Global score-threshold masks; exactly floor(S * total) weights pruned.

    Needs no calibration data. Cross-layer ties resolve by (layer order,
    flat index), matching the per-layer magnitude tie rule.
    """
    if not 0.0 <= S <= 1.0:
        raise ValueError(f"sparsity {S} outside [0, 1]")
    layers = list(net.prunable)
    if not layers:
        raise ValueError("net has no prunable layers")
    scores = []
    layer_ids = []
    flat_ids = []
    for i, l in enumerate(layers):
        node = net.node(l)
        assert isinstance(node, Conv2d)
        sc = lamp_scores(node.weight).ravel()
        scores.append(sc)
        layer_ids.append(np.full(sc.size, i, dtype=np.int64))
        flat_ids.append(np.arange(sc.size, dtype=np.int64))
    pooled = np.concatenate(scores)
    order = np.lexsort((np.concatenate(flat_ids), np.concatenate(layer_ids), pooled))
    k = math.floor(S * pooled.size)
    keep = np.ones(pooled.size, dtype=np.uint8)
    keep[order[:k]] = 0
    masks = {}
    off = 0
    for l in layers:
        n = net.node(l).weight.size
        masks[l] = keep[off:off + n].reshape(net.node(l).weight.shape)
        off += n
    return masks


@dataclass
class ProjectionForcedResult:
    allocation: dict[str, float]
    projection_layers: list[str]
    projection_sparsity: float
    regular: ErkResult
    implied_regular_sparsity: float


def projection_forced_erk(shapes: Mapping[str, Sequence[int]],
                          counts: Mapping[str, int],
                          proj_layers: Sequence[str], proj_s: float, S: float,
                          cap: float = 1.0, floor: float = 0.025,
                          ) -> ProjectionForcedResult:
    """Pin projection convs at a forced sparsity, re-solve the rest.

    The remaining layers receive whatever keep budget is left so the global
    parameter-weighted sparsity still lands exactly on ``S``.
    """
    if not 0.0 <= proj_s <= 1.0:
        raise ValueError(f"projection sparsity {proj_s} outside [0, 1]")
    proj = list(proj_layers)
    unknown = [l for l in proj if l not in shapes]
    if unknown:
        raise ValueError(f"projection layers missing from shapes: {unknown}")
    regular = [l for l in shapes if l not in set(proj)]
    if not regular:
        raise ValueError("no regular layers left to re-solve")
    total = sum(counts[l] for l in shapes)
    n_proj = sum(counts[l] for l in proj)
    n_reg = total - n_proj
    keep_reg = (1.0 - S) * total - (1.0 - proj_s) * n_proj
    density_reg = keep_reg / n_reg
    if not 0.0 < density_reg < 1.0:
        raise InfeasibleBudgetError(
            f"forcing projections to {proj_s} leaves regular density {density_reg:.4f}")
    reg_result = erk_allocate({l: shapes[l] for l in regular},
                              {l: counts[l] for l in regular},
                              S=1.0 - density_reg, cap=cap, floor=floor)
    allocation = {l: float(proj_s) for l in proj}
    allocation.update(reg_result.sparsity)
    implied = sum(counts[l] * allocation[l] for l in regular) / n_reg
    return ProjectionForcedResult(
        allocation=allocation, projection_layers=proj,
        projection_sparsity=float(proj_s), regular=reg_result,
        implied_regular_sparsity=implied)


def allocation_objective(allocation: Mapping[str, float],
                         curves: DiagnosticCurves) -> float:
    """Mean repair ratio of an allocation, by exact curve lookup.

    Every (layer, sparsity) pair must already exist in the curves; missing
    points raise instead of interpolating.
    """
    if not allocation:
        raise ValueError("empty allocation")
    return sum(curves.rr_at(l, float(s)) for l, s in allocation.items()) / len(allocation)


def conv_shapes(net: NetworkSpec) -> dict[str, tuple[int, int, int, int]]:
    """(out, in, kh, kw) for every prunable conv, in graph order."""
    shapes = {}
    for l in net.prunable:
        node = net.node(l)
        assert isinstance(node, Conv2d)
        shapes[l] = (node.out_ch, node.in_ch, node.kh, node.kw)
    return shapes
