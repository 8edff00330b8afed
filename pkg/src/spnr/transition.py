"""Transition detection over sweep objectives, plus rank correlations."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .repair import EPSILON

S_LOW = 0.90
S_HIGH = 0.975
ALPHA_CORE = 0.7
ALPHA_BROAD = 0.3


def rr_objective_gap(j_erk: float, j_rr: float) -> float:
    """How much worse the shape-based allocation scores than the repair-aware one."""
    return j_erk - j_rr


def repair_stress(j_s: float, j_low: float, j_high: float,
                  epsilon: float = EPSILON) -> float:
    """Objective position between the low and high anchors, clipped to [0, 1]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    t = (j_s - j_low) / (j_high - j_low + epsilon)
    return float(min(1.0, max(0.0, t)))


def cts_score(gap: float, stress: float) -> float:
    return gap * stress


def smooth3(series: Sequence[float]) -> list[float]:
    """Centered 3-point moving average; endpoints average their 2 neighbors."""
    x = list(series)
    n = len(x)
    if n == 0:
        raise ValueError("empty series")
    if n == 1:
        return [float(x[0])]
    out = [0.0] * n
    out[0] = (x[0] + x[1]) / 2.0
    out[-1] = (x[-2] + x[-1]) / 2.0
    for i in range(1, n - 1):
        out[i] = (x[i - 1] + x[i] + x[i + 1]) / 3.0
    return out


@dataclass
class Band:
    start_idx: int
    end_idx: int          # inclusive
    s_start: float
    s_end: float
    threshold: float


def _runs(flags: Sequence[bool]) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(flags) - 1))
    return runs


def detect_band(targets: Sequence[float], smoothed: Sequence[float],
                anchor_indices: Sequence[int], alpha: float,
                containing: Band | None = None) -> Band | None:
    """Longest contiguous run of smoothed scores above the anchored threshold.

    The baseline B is the best smoothed score over the low-sparsity anchors;
    the threshold is ``B + alpha * (max - B)``. Returns None when the series
    never rises above its baseline. Ties between equally long runs resolve
    toward higher sparsity. When ``containing`` is given, the run that
    contains it wins instead (used so a lower threshold widens, never moves,
    a detected band).
    """
    if len(targets) != len(smoothed):
        raise ValueError("targets and series length mismatch")
    if not anchor_indices:
        raise ValueError("need at least one anchor index")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha {alpha} outside (0, 1)")
    base = max(smoothed[i] for i in anchor_indices)
    peak = max(smoothed)
    if peak <= base:
        return None
    thr = base + alpha * (peak - base)
    runs = _runs([v >= thr for v in smoothed])
    if not runs:
        return None
    if containing is not None:
        for a, b in runs:
            if a <= containing.start_idx and containing.end_idx <= b:
                return Band(a, b, targets[a], targets[b], thr)
        return None
    length = max(b - a for a, b in runs)
    a, b = [r for r in runs if r[1] - r[0] == length][-1]
    return Band(a, b, targets[a], targets[b], thr)


@dataclass
class CtsProfile:
    targets: list[float]
    j_rr: list[float]
    j_erk: list[float]
    gap: list[float]
    stress: list[float]
    cts: list[float]
    smoothed: list[float]
    anchor_low: int
    anchor_high: int
    anchor_indices: list[int]
    core: Band | None
    broad: Band | None

    def to_json(self) -> dict:
        def band(b: Band | None) -> dict | None:
            if b is None:
                return None
            return {"start": b.s_start, "end": b.s_end, "start_idx": b.start_idx,
                    "end_idx": b.end_idx, "threshold": b.threshold}
        return {"targets": self.targets, "j_rr": self.j_rr, "j_erk": self.j_erk,
                "gap": self.gap, "stress": self.stress, "cts": self.cts,
                "smoothed": self.smoothed,
                "anchors": {"low": self.anchor_low, "high": self.anchor_high,
                            "baseline": self.anchor_indices},
                "core": band(self.core), "broad": band(self.broad)}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sparsity", "j_rr", "j_erk", "gap", "stress", "cts",
                        "smoothed", "in_core", "in_broad"])
            for i, t in enumerate(self.targets):
                in_core = (self.core is not None
                           and self.core.start_idx <= i <= self.core.end_idx)
                in_broad = (self.broad is not None
                            and self.broad.start_idx <= i <= self.broad.end_idx)
                w.writerow([repr(t), repr(self.j_rr[i]), repr(self.j_erk[i]),
                            repr(self.gap[i]), repr(self.stress[i]),
                            repr(self.cts[i]), repr(self.smoothed[i]),
                            int(in_core), int(in_broad)])


def _anchor_index(targets: Sequence[float], wanted: float, knob: str) -> int:
    best = min(range(len(targets)), key=lambda i: (abs(targets[i] - wanted), i))
    if not math.isclose(targets[best], wanted, rel_tol=0.0, abs_tol=1e-12):
        warnings.warn(f"no swept target at {knob}={wanted}; "
                      f"using nearest {targets[best]}", stacklevel=3)
    return best


def compute_cts_profile(targets: Sequence[float], j_rr: Sequence[float],
                        j_erk: Sequence[float], s_low: float = S_LOW,
                        s_high: float = S_HIGH, alpha: float = ALPHA_CORE,
                        alpha_broad: float = ALPHA_BROAD,
                        epsilon: float = EPSILON,
                        low_anchor_cutoff: float | None = None) -> CtsProfile:
    """Full detector: gap x stress, smoothing, core and broad bands.

    ``low_anchor_cutoff`` optionally widens the baseline anchor set to all
    targets strictly below it (besides the s_low anchor itself).
    """
    targets = [float(t) for t in targets]
    if len(targets) < 2:
        raise ValueError("need at least two swept targets")
    if sorted(set(targets)) != targets:
        raise ValueError("targets must be strictly increasing")
    if not (len(targets) == len(j_rr) == len(j_erk)):
        raise ValueError("targets and objective series lengths disagree")
    i_low = _anchor_index(targets, s_low, "s_low")
    i_high = _anchor_index(targets, s_high, "s_high")
    j_lo, j_hi = j_rr[i_low], j_rr[i_high]
    gap = [rr_objective_gap(e, r) for e, r in zip(j_erk, j_rr)]
    stress = [repair_stress(j, j_lo, j_hi, epsilon) for j in j_rr]
    cts = [cts_score(g, t) for g, t in zip(gap, stress)]
    smoothed = smooth3(cts)
    anchors = {i_low}
    if low_anchor_cutoff is not None:
        anchors |= {i for i, t in enumerate(targets) if t < low_anchor_cutoff}
    anchor_indices = sorted(anchors)
    core = detect_band(targets, smoothed, anchor_indices, alpha)
    broad = detect_band(targets, smoothed, anchor_indices, alpha_broad,
                        containing=core)
    return CtsProfile(targets=targets, j_rr=list(map(float, j_rr)),
                      j_erk=list(map(float, j_erk)), gap=gap, stress=stress,
                      cts=cts, smoothed=smoothed, anchor_low=i_low,
                      anchor_high=i_high, anchor_indices=anchor_indices,
                      core=core, broad=broad)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    arr = np.asarray(x, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j < arr.size and arr[order[j]] == arr[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j - 1) / 2.0 + 1.0
        i = j
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation: Pearson over average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d and the same length")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    den = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if den == 0.0:
        raise ValueError("constant input has no rank correlation")
    return float(np.sum(dx * dy)) / den


def kendall(x: Sequence[float], y: Sequence[float]) -> float:
    """Tau-b by explicit pair counting with tie corrections."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d and the same length")
    n = x.size
    if n < 2:
        raise ValueError("need at least two observations")
    conc = disc = ties_x = ties_y = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif (dx > 0) == (dy > 0):
                conc += 1
            else:
                disc += 1
    den = math.sqrt((conc + disc + ties_x) * (conc + disc + ties_y))
    if den == 0.0:
        raise ValueError("constant input has no rank correlation")
    return (conc - disc) / den
