"""Single-layer pruning distortion diagnostics and the repair ratio.

Each diagnostic isolates one conv layer: only that layer is masked while the
rest of the net stays dense, and the layer's post-conv (pre-BN) activation is
compared against the dense reference over a calibration set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .container import batches_fingerprint
from .engine import ChannelStats, Conv2d, NetworkSpec, StatsAccumulator, bn_after, forward
from .masking import apply_masks, magnitude_mask
from .repair import EPSILON, RepairConfig, cr_bn

DEFAULT_GRID = (0.70, 0.80, 0.85, 0.90, 0.925, 0.95, 0.975)


def distortion(a: np.ndarray, b: np.ndarray, epsilon: float = EPSILON) -> float:
    """Channel-normalized squared distance, averaged over channels.

    For [C,H,W] inputs: (1/C) * sum_c ||a_c - b_c||^2 / (||a_c||^2 + eps).
    Batched [N,C,H,W] inputs give the per-sample mean. The reference ``a``
    provides the normalizer, so the measure is not symmetric.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if a.ndim == 3:
        a = a[None]
        b = b[None]
    elif a.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got {a.shape}")
    a64 = a.astype(np.float64)
    d = np.square(a64 - b.astype(np.float64)).sum(axis=(2, 3))
    ref = np.square(a64).sum(axis=(2, 3))
    per_sample = (d / (ref + epsilon)).mean(axis=1)
    return float(per_sample.mean())


def _per_sample_distortions(a: np.ndarray, b: np.ndarray, epsilon: float) -> np.ndarray:
    a64 = a.astype(np.float64)
    d = np.square(a64 - b.astype(np.float64)).sum(axis=(2, 3))
    ref = np.square(a64).sum(axis=(2, 3))
    return (d / (ref + epsilon)).mean(axis=1)


def rr_ratio(d_raw: float, d_repair: float, epsilon: float = EPSILON) -> float:
    """Fraction of raw pruning distortion left after repair."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if d_raw < 0 or d_repair < 0:
        raise ValueError("distortions must be nonnegative")
    return (d_repair + epsilon) / (d_raw + epsilon)


@dataclass
class DiagnosticPoint:
    layer: str
    s: float
    d_raw: float
    d_repair: float
    rr: float
    extras: dict = field(default_factory=dict)


@dataclass
class DiagnosticCurves:
    grid: list[float]
    layers: list[str]
    calib_id: str
    epsilon: float
    points: dict[tuple[str, float], DiagnosticPoint]

    def point(self, layer: str, s: float) -> DiagnosticPoint:
        try:
            return self.points[(layer, s)]
        except KeyError:
            raise KeyError(f"no diagnostic point for layer {layer!r} at s={s!r}; "
                           "curves must be extended, never interpolated") from None

    def rr_at(self, layer: str, s: float) -> float:
        return self.point(layer, s).rr

    def has_point(self, layer: str, s: float) -> bool:
        return (layer, s) in self.points

    def to_json(self) -> dict:
        pts = []
        for (layer, s) in sorted(self.points):
            p = self.points[(layer, s)]
            row = {"layer": p.layer, "s": p.s, "d_raw": p.d_raw,
                   "d_repair": p.d_repair, "rr": p.rr}
            if p.extras:
                row["extras"] = p.extras
            pts.append(row)
        return {"grid": list(self.grid), "calib_id": self.calib_id,
                "epsilon": self.epsilon, "layers": list(self.layers), "points": pts}

    @classmethod
    def from_json(cls, doc: Mapping) -> "DiagnosticCurves":
        points = {}
        for row in doc["points"]:
            p = DiagnosticPoint(row["layer"], row["s"], row["d_raw"],
                                row["d_repair"], row["rr"], row.get("extras", {}))
            points[(p.layer, p.s)] = p
        return cls(grid=list(doc["grid"]), layers=list(doc["layers"]),
                   calib_id=doc["calib_id"], epsilon=doc["epsilon"], points=points)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "DiagnosticCurves":
        with open(path) as f:
            return cls.from_json(json.load(f))


class CurveBuilder:
    """Builds single-layer diagnostic curves with a shared dense reference.

    Dense tap activations and their channel statistics are computed once per
    (net, calibration) pair and reused by every (layer, sparsity) evaluation;
    ``dense_passes`` counts the reference forwards for cache verification.
    """

    def __init__(self, net: NetworkSpec, calib: Sequence[np.ndarray],
                 cfg: RepairConfig | None = None,
                 layers: Sequence[str] | None = None,
                 tap_post_bn: bool = False) -> None:
        if not calib:
            raise ValueError("empty calibration set")
        self.net = net
        self.calib = [np.ascontiguousarray(b, dtype=np.float32) for b in calib]
        self.cfg = cfg or RepairConfig()
        self.layers = list(layers) if layers is not None else list(net.prunable)
        for l in self.layers:
            if not isinstance(net.node(l), Conv2d):
                raise ValueError(f"diagnostic layer {l!r} is not a conv")
        self.tap_post_bn = tap_post_bn
        self.calib_id = batches_fingerprint(self.calib)
        self.dense_passes = 0
        self._dense_taps: dict[str, list[np.ndarray]] | None = None
        self._dense_stats: dict[str, ChannelStats] | None = None
        self._bn_names = {l: (bn.name if (bn := bn_after(net, l)) else None)
                          for l in self.layers}

    def _dense_reference(self) -> tuple[dict[str, list[np.ndarray]], dict[str, ChannelStats]]:
        if self._dense_taps is None:
            taps: dict[str, list[np.ndarray]] = {l: [] for l in self.layers}
            tap_names = list(self.layers)
            if self.tap_post_bn:
                tap_names += [b for b in self._bn_names.values() if b]
            accs = {l: StatsAccumulator() for l in self.layers}
            for batch in self.calib:
                _, tapped = forward(self.net, batch, taps=tap_names)
                self.dense_passes += 1
                for l in self.layers:
                    taps[l].append(tapped[l])
                    accs[l].add(tapped[l])
                for l, bname in self._bn_names.items():
                    if self.tap_post_bn and bname:
                        taps.setdefault(f"post_bn:{l}", []).append(tapped[bname])
            self._dense_taps = taps
            self._dense_stats = {l: a.finalize() for l, a in accs.items()}
        return self._dense_taps, self._dense_stats

    def evaluate(self, layer: str, s: float) -> DiagnosticPoint:
        """Exact single-layer diagnostic at one sparsity value."""
        if layer not in self.layers:
            raise ValueError(f"layer {layer!r} not under diagnosis")
        dense_taps, dense_stats = self._dense_reference()
        node = self.net.node(layer)
        assert isinstance(node, Conv2d)
        mask = magnitude_mask(node.weight, s)
        masked = apply_masks(self.net, {layer: mask})
        eps = self.cfg.epsilon

        raw_parts = []
        pruned_acc = StatsAccumulator()
        masked_taps = []
        for batch, ref in zip(self.calib, dense_taps[layer]):
            _, tapped = forward(masked, batch, taps=[layer])
            masked_taps.append(tapped[layer])
            pruned_acc.add(tapped[layer])
            raw_parts.append(_per_sample_distortions(ref, tapped[layer], eps))
        d_raw = float(np.concatenate(raw_parts).mean())

        repaired, _ = cr_bn(self.net, {layer: mask}, self.calib, self.cfg,
                            dense_stats={layer: dense_stats[layer]},
                            pruned_stats={layer: pruned_acc.finalize()})
        rep_parts = []
        extras: dict = {}
        bname = self._bn_names[layer]
        post_parts_raw, post_parts_rep = [], []
        for i, batch in enumerate(self.calib):
            tap_names = [layer] + ([bname] if self.tap_post_bn and bname else [])
            _, tapped = forward(repaired, batch, taps=tap_names)
            rep_parts.append(_per_sample_distortions(dense_taps[layer][i], tapped[layer], eps))
            if self.tap_post_bn and bname:
                ref_bn = dense_taps[f"post_bn:{layer}"][i]
                post_parts_rep.append(_per_sample_distortions(ref_bn, tapped[bname], eps))
        d_repair = float(np.concatenate(rep_parts).mean())

        if self.tap_post_bn and bname:
            for i, _ in enumerate(self.calib):
                _, tapped = forward(masked, self.calib[i], taps=[bname])
                post_parts_raw.append(_per_sample_distortions(
                    dense_taps[f"post_bn:{layer}"][i], tapped[bname], eps))
            d_raw_bn = float(np.concatenate(post_parts_raw).mean())
            d_rep_bn = float(np.concatenate(post_parts_rep).mean())
            extras = {"d_raw_post_bn": d_raw_bn, "d_repair_post_bn": d_rep_bn,
                      "rr_post_bn": rr_ratio(d_raw_bn, d_rep_bn, eps)}

        return DiagnosticPoint(layer=layer, s=float(s), d_raw=d_raw,
                               d_repair=d_repair,
                               rr=rr_ratio(d_raw, d_repair, eps), extras=extras)

    def build(self, grid: Sequence[float] = DEFAULT_GRID) -> DiagnosticCurves:
        grid = [float(s) for s in grid]
        if sorted(set(grid)) != grid:
            raise ValueError("grid must be strictly increasing")
        points = {}
        for layer in self.layers:
            for s in grid:
                points[(layer, s)] = self.evaluate(layer, s)
        return DiagnosticCurves(grid=grid, layers=list(self.layers),
                                calib_id=self.calib_id, epsilon=self.cfg.epsilon,
                                points=points)

    def extend(self, curves: DiagnosticCurves,
               needed: Mapping[str, Iterable[float]]) -> DiagnosticCurves:
        """Add exact evaluations at off-grid sparsities (never interpolates)."""
        if curves.calib_id != self.calib_id:
            raise ValueError("curves were built from a different calibration set")
        for layer, values in needed.items():
            for s in values:
                s = float(s)
                if not curves.has_point(layer, s):
                    curves.points[(layer, s)] = self.evaluate(layer, s)
        return curves


def raw_shift(net: NetworkSpec, layer: str, s: float, calib: Sequence[np.ndarray],
              epsilon: float = EPSILON) -> float:
    """Distortion of one layer's tap when only that layer is magnitude-masked."""
    builder = CurveBuilder(net, calib, RepairConfig(epsilon=epsilon), layers=[layer])
    dense_taps, _ = builder._dense_reference()
    node = net.node(layer)
    assert isinstance(node, Conv2d)
    masked = apply_masks(net, {layer: magnitude_mask(node.weight, s)})
    parts = []
    for batch, ref in zip(builder.calib, dense_taps[layer]):
        _, tapped = forward(masked, batch, taps=[layer])
        parts.append(_per_sample_distortions(ref, tapped[layer], epsilon))
    return float(np.concatenate(parts).mean())


def repair_residual(net: NetworkSpec, layer: str, s: float,
                    calib: Sequence[np.ndarray],
                    cfg: RepairConfig | None = None) -> float:
    """Distortion left at the same tap after the full repair pipeline."""
    builder = CurveBuilder(net, calib, cfg, layers=[layer])
    return builder.evaluate(layer, s).d_repair
