"""Channelwise variance repair and BatchNorm running-stat recalibration.

The repair operator compares per-channel tap variances between the dense
net and its masked counterpart over a calibration set, then rescales each
output filter by a shrinkage-damped variance-matching factor. BatchNorm
recalibration afterwards re-estimates running statistics from activations
flowing through the repaired net.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .engine import (BatchNorm, ChannelStats, Conv2d, NetworkSpec,
                     StatsAccumulator, forward, replace_conv_weights)
from .masking import apply_masks

EPSILON = 1e-8


@dataclass
class RepairConfig:
    epsilon: float = EPSILON
    bn_batches: int = 20
    bn_batch_size: int = 128
    bn_momentum: float = 0.1
    tau_override: float | None = None
    scale_bias: bool = True


@dataclass
class RepairScales:
    """Per-channel repair record for one conv layer."""
    gamma: np.ndarray
    lam: np.ndarray
    tau: float
    var_dense: np.ndarray
    var_pruned: np.ndarray

    def to_json(self) -> dict:
        return {"gamma": self.gamma.tolist(), "lam": self.lam.tolist(),
                "tau": self.tau, "var_dense": self.var_dense.tolist(),
                "var_pruned": self.var_pruned.tolist()}


def direct_scale(var_dense: np.ndarray, var_pruned: np.ndarray,
                 epsilon: float = EPSILON) -> np.ndarray:
    """Raw variance-matching factor sqrt((v_d + eps) / (v_p + eps))."""
    vd = np.asarray(var_dense, dtype=np.float64)
    vp = np.asarray(var_pruned, dtype=np.float64)
    if np.any(vd < 0) or np.any(vp < 0) or epsilon <= 0:
        raise ValueError("variances must be nonnegative and epsilon positive")
    return np.sqrt((vd + epsilon) / (vp + epsilon))


def shrinkage_scale(var_dense: np.ndarray, var_pruned: np.ndarray, tau: float,
                    epsilon: float = EPSILON) -> np.ndarray:
    """Reliability-damped scale exp(lam * r / 2).

    ``r`` is the log-variance gap; ``lam = v_p / (v_p + tau)`` pulls the
    correction toward 1 for channels whose pruned variance is small relative
    to ``tau``. A channel with ``v_p + tau == 0`` gets ``lam = 0`` (scale 1).
    """
    vd = np.asarray(var_dense, dtype=np.float64)
    vp = np.asarray(var_pruned, dtype=np.float64)
    if np.any(vd < 0) or np.any(vp < 0) or tau < 0 or epsilon <= 0:
        raise ValueError("variances and tau must be nonnegative, epsilon positive")
    r = np.log(vd + epsilon) - np.log(vp + epsilon)
    denom = vp + tau
    lam = np.divide(vp, denom, out=np.zeros_like(vp), where=denom > 0)
    return np.exp(0.5 * lam * r)


def reliability(var_pruned: np.ndarray, tau: float) -> np.ndarray:
    vp = np.asarray(var_pruned, dtype=np.float64)
    denom = vp + tau
    return np.divide(vp, denom, out=np.zeros_like(vp), where=denom > 0)


def estimate_tau(var_pruned: np.ndarray) -> float:
    """Layer damping constant: the median post-pruning channel variance."""
    vp = np.asarray(var_pruned, dtype=np.float64)
    if vp.size == 0:
        raise ValueError("no channels to estimate tau from")
    return float(np.median(vp))


def collect_tap_stats(net: NetworkSpec, layers: Sequence[str],
                      batches: Sequence[np.ndarray]) -> dict[str, ChannelStats]:
    """Per-channel tap statistics for the named convs over all batches."""
    if not batches:
        raise ValueError("empty calibration set")
    accs = {l: StatsAccumulator() for l in layers}
    for batch in batches:
        _, tapped = forward(net, batch, taps=layers)
        for l in layers:
            accs[l].add(tapped[l])
    return {l: acc.finalize() for l, acc in accs.items()}


def channelwise_repair(net: NetworkSpec, masks: Mapping[str, np.ndarray],
                       calib: Sequence[np.ndarray], cfg: RepairConfig,
                       dense_stats: Mapping[str, ChannelStats] | None = None,
                       pruned_stats: Mapping[str, ChannelStats] | None = None,
                       ) -> tuple[NetworkSpec, dict[str, RepairScales]]:
    """Mask, then rescale every masked conv's output filters.

    Scales for all layers are computed from one pair of calibration passes
    (dense net vs fully masked net) and applied in one shot; pruned weights
    stay exactly zero. Returns the repaired net and the per-layer scales.
    """
    layers = list(masks)
    masked = apply_masks(net, masks)
    if dense_stats is None:
        dense_stats = collect_tap_stats(net, layers, calib)
    if pruned_stats is None:
        pruned_stats = collect_tap_stats(masked, layers, calib)

    updates: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
    scales: dict[str, RepairScales] = {}
    for l in layers:
        vd, vp = dense_stats[l].var, pruned_stats[l].var
        tau = cfg.tau_override if cfg.tau_override is not None else estimate_tau(vp)
        gamma = shrinkage_scale(vd, vp, tau, cfg.epsilon)
        node = masked.node(l)
        assert isinstance(node, Conv2d)
        w = (node.weight.astype(np.float64) * gamma[:, None, None, None]).astype(np.float32)
        b = node.bias
        if b is not None and cfg.scale_bias:
            b = (b.astype(np.float64) * gamma).astype(np.float32)
        updates[l] = (w, b)
        scales[l] = RepairScales(gamma=gamma, lam=reliability(vp, tau), tau=tau,
                                 var_dense=vd, var_pruned=vp)
    return replace_conv_weights(masked, updates), scales


def make_bn_stream(batches: Sequence[np.ndarray], cfg: RepairConfig) -> list[np.ndarray]:
    """Deterministic recalibration stream from a calibration pool.

    Pools the images in order and cycles them until ``bn_batches`` batches of
    ``bn_batch_size`` are filled. No randomness: the same pool and config
    always produce the same stream.
    """
    if not batches:
        raise ValueError("empty calibration pool")
    pool = np.concatenate([np.asarray(b) for b in batches], axis=0)
    if pool.shape[0] == 0:
        raise ValueError("calibration pool holds zero images")
    total = cfg.bn_batches * cfg.bn_batch_size
    idx = np.arange(total) % pool.shape[0]
    return [pool[idx[i * cfg.bn_batch_size:(i + 1) * cfg.bn_batch_size]]
            for i in range(cfg.bn_batches)]


def bn_recalibrate(net: NetworkSpec, stream: Sequence[np.ndarray],
                   cfg: RepairConfig) -> NetworkSpec:
    """EMA re-estimation of every BatchNorm node's running statistics.

    Each stream batch flows through the net with BatchNorm normalizing by
    the batch's own statistics; running stats then move by
    ``running += momentum * (batch - running)``.
    """
    bns = [n for n in net.nodes if isinstance(n, BatchNorm)]
    if not bns:
        raise ValueError("net contains no BatchNorm nodes")
    if len(stream) != cfg.bn_batches:
        raise ValueError(f"stream has {len(stream)} batches, config says {cfg.bn_batches}")
    m = cfg.bn_momentum
    state = {bn.name: (bn.running_mean.astype(np.float64),
                       bn.running_var.astype(np.float64)) for bn in bns}
    for batch in stream:
        collected: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        forward(net, np.ascontiguousarray(batch, dtype=np.float32),
                bn_mode="batch", bn_stats_out=collected)
        for name, (bm, bv) in collected.items():
            rm, rv = state[name]
            state[name] = (rm + m * (bm - rm), rv + m * (bv - rv))
    new_nodes = {}
    for bn in bns:
        rm, rv = state[bn.name]
        rm32 = rm.astype(np.float32)
        rv32 = rv.astype(np.float32)
        rm32.flags.writeable = False
        rv32.flags.writeable = False
        new_nodes[bn.name] = replace(bn, running_mean=rm32, running_var=rv32)
    return net.copy_with_nodes(new_nodes)


def cr_bn(net: NetworkSpec, masks: Mapping[str, np.ndarray],
          calib: Sequence[np.ndarray], cfg: RepairConfig,
          dense_stats: Mapping[str, ChannelStats] | None = None,
          pruned_stats: Mapping[str, ChannelStats] | None = None,
          ) -> tuple[NetworkSpec, dict[str, RepairScales]]:
    """Full repair pipeline: channelwise rescale, then BN recalibration.

    Scales are always computed before recalibration so the recal stream sees
    the rescaled weights. Nets without BatchNorm skip the second stage.
    """
    repaired, scales = channelwise_repair(net, masks, calib, cfg,
                                          dense_stats, pruned_stats)
    if any(isinstance(n, BatchNorm) for n in net.nodes):
        repaired = bn_recalibrate(repaired, make_bn_stream(calib, cfg), cfg)
    return repaired, scales
