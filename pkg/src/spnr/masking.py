"""Magnitude masks over conv weights and the global sparsity identity."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .engine import Conv2d, NetworkSpec, replace_conv_weights


def magnitude_mask(weight: np.ndarray, s: float) -> np.ndarray:
    """u8 keep-mask zeroing exactly ``floor(s * n)`` smallest-|w| entries.

    Ties are broken by flat row-major index: the lower index is pruned first.
    Masks nest monotonically in ``s`` because the removal order is a fixed
    permutation of the indices.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity {s} outside [0, 1]")
    n = weight.size
    k = math.floor(s * n)
    mask = np.ones(n, dtype=np.uint8)
    if k > 0:
        order = np.argsort(np.abs(weight.ravel()), kind="stable")
        mask[order[:k]] = 0
    return mask.reshape(weight.shape)


def prunable_counts(net: NetworkSpec) -> dict[str, int]:
    """Weight-element counts for the prunable conv layers (biases excluded)."""
    counts = {}
    for name in net.prunable:
        node = net.node(name)
        assert isinstance(node, Conv2d)
        counts[name] = node.weight.size
    return counts


def masks_from_allocation(net: NetworkSpec, allocation: Mapping[str, float]) -> dict[str, np.ndarray]:
    """Per-layer magnitude masks realizing an allocation on a concrete net."""
    masks = {}
    for layer, s in allocation.items():
        node = net.node(layer)
        if not isinstance(node, Conv2d):
            raise ValueError(f"allocation names non-conv layer {layer!r}")
        if layer == net.first_conv:
            raise ValueError("allocation touches the dense stem conv")
        masks[layer] = magnitude_mask(node.weight, s)
    return masks


def global_magnitude_mask(net: NetworkSpec, S: float) -> dict[str, np.ndarray]:
    """One pooled magnitude threshold across all prunable layers.

    Exactly ``floor(S * total)`` weights are zeroed; ties resolve by
    (layer order in the prunable list, flat index within the layer).
    """
    if not 0.0 <= S <= 1.0:
        raise ValueError(f"sparsity {S} outside [0, 1]")
    layers = list(net.prunable)
    flats = [np.abs(net.node(l).weight.ravel()) for l in layers]
    pooled = np.concatenate(flats) if flats else np.empty(0, dtype=np.float32)
    k = math.floor(S * pooled.size)
    keep = np.ones(pooled.size, dtype=np.uint8)
    if k > 0:
        order = np.argsort(pooled, kind="stable")
        keep[order[:k]] = 0
    masks = {}
    off = 0
    for l, flat in zip(layers, flats):
        masks[l] = keep[off:off + flat.size].reshape(net.node(l).weight.shape)
        off += flat.size
    return masks


def apply_masks(net: NetworkSpec, masks: Mapping[str, np.ndarray]) -> NetworkSpec:
    """Copy of the net with masked weights zeroed; the original is untouched.

    Unmasked layers share their arrays with the original (the overlay is
    indistinguishable from a deep copy for any forward pass).
    """
    updates = {}
    for layer, mask in masks.items():
        node = net.node(layer)
        if not isinstance(node, Conv2d):
            raise ValueError(f"mask names non-conv layer {layer!r}")
        if mask.shape != node.weight.shape:
            raise ValueError(f"mask shape {mask.shape} != weight shape {node.weight.shape} "
                             f"for layer {layer!r}")
        updates[layer] = (node.weight * (mask != 0), node.bias)
    return replace_conv_weights(net, updates)


def mask_sparsity(mask: np.ndarray) -> float:
    return float((mask == 0).sum()) / mask.size


def global_sparsity(allocation: Mapping[str, float], counts: Mapping[str, int]) -> float:
    """Parameter-weighted global sparsity over the full layer universe.

    ``counts`` defines the universe; layers absent from ``allocation`` count
    as dense (sparsity 0).
    """
    missing = set(allocation) - set(counts)
    if missing:
        raise ValueError(f"allocation names layers without counts: {sorted(missing)}")
    total = sum(counts.values())
    if total == 0:
        raise ValueError("layer universe covers zero parameters")
    return sum(counts[l] * s for l, s in allocation.items()) / total


def allocation_from_masks(masks: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Re-express concrete masks as per-layer sparsities (zeros / n)."""
    return {l: mask_sparsity(m) for l, m in masks.items()}
