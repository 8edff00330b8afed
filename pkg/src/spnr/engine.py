"""Deterministic CPU inference engine for small CNN graphs.

Nodes are plain dataclasses wired by name into a topologically ordered list.
All activations are float32; convolution accumulates in a fixed order
(input channel, then kernel row, then kernel column) so repeated forwards
are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32


class GraphError(ValueError):
    """Invalid graph structure or shape mismatch; message names the node."""


@dataclass
class Conv2d:
    name: str
    inputs: list[str]
    out_ch: int
    in_ch: int
    kh: int
    kw: int
    stride: int
    padding: int
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: str = field(default="Conv2d", init=False, repr=False)


@dataclass
class BatchNorm:
    name: str
    inputs: list[str]
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    kind: str = field(default="BatchNorm", init=False, repr=False)


@dataclass
class ReLU:
    name: str
    inputs: list[str]
    kind: str = field(default="ReLU", init=False, repr=False)


@dataclass
class MaxPool:
    name: str
    inputs: list[str]
    kernel: int
    stride: int
    padding: int = 0
    kind: str = field(default="MaxPool", init=False, repr=False)


@dataclass
class GlobalAvgPool:
    name: str
    inputs: list[str]
    kind: str = field(default="GlobalAvgPool", init=False, repr=False)


@dataclass
class Linear:
    name: str
    inputs: list[str]
    out_features: int
    in_features: int
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: str = field(default="Linear", init=False, repr=False)


@dataclass
class Add:
    name: str
    inputs: list[str]
    kind: str = field(default="Add", init=False, repr=False)


LayerNode = Conv2d | BatchNorm | ReLU | MaxPool | GlobalAvgPool | Linear | Add

NODE_KINDS = ("Conv2d", "BatchNorm", "ReLU", "MaxPool", "GlobalAvgPool", "Linear", "Add")


@dataclass
class NetworkSpec:
    """A validated, topologically ordered CNN graph.

    ``prunable`` lists conv layers eligible for masking; ``first_conv`` is the
    stem conv, always dense and never in ``prunable``. Treat instances as
    immutable: surgery functions return modified copies.
    """

    nodes: list[LayerNode]
    input_shape: tuple[int, int, int]
    prunable: list[str]
    first_conv: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_name = {n.name: n for n in self.nodes}
        validate_network(self)

    def node(self, name: str) -> LayerNode:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"no node named {name!r}") from None

    def copy_with_nodes(self, new_nodes: Mapping[str, LayerNode]) -> "NetworkSpec":
        """Copy sharing every node except the named replacements."""
        nodes = [new_nodes.get(n.name, n) for n in self.nodes]
        return NetworkSpec(nodes, self.input_shape, list(self.prunable),
                           self.first_conv, dict(self.meta))

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name


def _freeze(a: np.ndarray | None) -> None:
    if a is not None:
        a.flags.writeable = False


def freeze_params(net: NetworkSpec) -> NetworkSpec:
    """Mark all parameter arrays read-only (load-time immutability)."""
    for n in net.nodes:
        if isinstance(n, (Conv2d, Linear)):
            _freeze(n.weight)
            _freeze(n.bias)
        elif isinstance(n, BatchNorm):
            for a in (n.gamma, n.beta, n.running_mean, n.running_var):
                _freeze(a)
    return net


INPUT = "input"  # reserved name: the network's input tensor


def validate_network(net: NetworkSpec) -> None:
    seen: set[str] = {INPUT}
    for n in net.nodes:
        if n.name in seen:
            raise GraphError(f"duplicate or reserved node name {n.name!r}")
        for ref in n.inputs:
            if ref not in seen:
                raise GraphError(
                    f"node {n.name!r} references {ref!r} before definition")
        seen.add(n.name)
        _validate_node(n)
    by_name = {n.name: n for n in net.nodes}
    if net.first_conv not in by_name or not isinstance(by_name[net.first_conv], Conv2d):
        raise GraphError(f"first_conv {net.first_conv!r} is not a Conv2d node")
    if net.first_conv in net.prunable:
        raise GraphError("first_conv must stay dense (listed as prunable)")
    for name in net.prunable:
        if name not in by_name or not isinstance(by_name[name], Conv2d):
            raise GraphError(f"prunable entry {name!r} is not a Conv2d node")


def _validate_node(n: LayerNode) -> None:
    narity = 2 if isinstance(n, Add) else 1
    if len(n.inputs) != narity:
        raise GraphError(f"node {n.name!r} expects {narity} input(s), got {len(n.inputs)}")
    if isinstance(n, Conv2d):
        want = (n.out_ch, n.in_ch, n.kh, n.kw)
        if n.weight.shape != want:
            raise GraphError(f"conv {n.name!r} weight shape {n.weight.shape} != {want}")
        if n.bias is not None and n.bias.shape != (n.out_ch,):
            raise GraphError(f"conv {n.name!r} bias shape {n.bias.shape}")
        if n.stride < 1:
            raise GraphError(f"conv {n.name!r} stride must be >= 1")
    elif isinstance(n, Linear):
        if n.weight.shape != (n.out_features, n.in_features):
            raise GraphError(f"linear {n.name!r} weight shape {n.weight.shape}")
        if n.bias is not None and n.bias.shape != (n.out_features,):
            raise GraphError(f"linear {n.name!r} bias shape {n.bias.shape}")
    elif isinstance(n, BatchNorm):
        c = n.gamma.shape
        for a in (n.beta, n.running_mean, n.running_var):
            if a.shape != c:
                raise GraphError(f"batchnorm {n.name!r} parameter shapes disagree")


def conv2d_forward(x: np.ndarray, node: Conv2d) -> np.ndarray:
    """Direct convolution with fixed accumulation order.

    Contributions are added input-channel first, then kernel row, then kernel
    column, each one a vectorized multiply-add over the whole output tensor.
    """
    n, cin, h, w = x.shape
    if cin != node.in_ch:
        raise GraphError(f"conv {node.name!r}: input has {cin} channels, expects {node.in_ch}")
    s, p = node.stride, node.padding
    hout = (h + 2 * p - node.kh) // s + 1
    wout = (w + 2 * p - node.kw) // s + 1
    if hout < 1 or wout < 1:
        raise GraphError(f"conv {node.name!r}: kernel larger than padded input")
    if p > 0:
        xp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=DTYPE)
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    out = np.zeros((n, node.out_ch, hout, wout), dtype=DTYPE)
    if node.bias is not None:
        out += node.bias[None, :, None, None]
    tmp = np.empty_like(out)
    wgt = node.weight
    for ci in range(cin):
        xc = xp[:, ci]
        for ki in range(node.kh):
            rows = xc[:, ki:ki + (hout - 1) * s + 1:s]
            for kj in range(node.kw):
                xs = rows[:, :, kj:kj + (wout - 1) * s + 1:s]
                np.multiply(xs[:, None, :, :], wgt[None, :, ci, ki, kj, None, None], out=tmp)
                out += tmp
    return out


def batchnorm_forward(x: np.ndarray, node: BatchNorm) -> np.ndarray:
    scale = (node.gamma / np.sqrt(node.running_var + node.eps)).astype(DTYPE)
    shift = (node.beta - node.running_mean * scale).astype(DTYPE)
    if x.ndim == 4:
        return x * scale[None, :, None, None] + shift[None, :, None, None]
    return x * scale[None, :] + shift[None, :]


def batchnorm_batch_forward(x: np.ndarray, node: BatchNorm) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize by the batch's own statistics; returns (y, mean, var).

    Variance is the population variance over batch and spatial positions.
    Used for running-stat recalibration, never for plain inference.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    mean = x.mean(axis=axes, dtype=np.float64)
    var = np.square(x.astype(np.float64) - _expand(mean, x.ndim)).mean(axis=axes)
    inv = (node.gamma / np.sqrt(var + node.eps))
    y = ((x - _expand(mean, x.ndim)) * _expand(inv, x.ndim) + _expand(node.beta.astype(np.float64), x.ndim))
    return y.astype(DTYPE), mean, var


def _expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def maxpool_forward(x: np.ndarray, node: MaxPool) -> np.ndarray:
    n, c, h, w = x.shape
    k, s, p = node.kernel, node.stride, node.padding
    hout = (h + 2 * p - k) // s + 1
    wout = (w + 2 * p - k) // s + 1
    if hout < 1 or wout < 1:
        raise GraphError(f"maxpool {node.name!r}: window larger than padded input")
    if p > 0:
        xp = np.full((n, c, h + 2 * p, w + 2 * p), -np.inf, dtype=DTYPE)
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    out = np.full((n, c, hout, wout), -np.inf, dtype=DTYPE)
    for ki in range(k):
        rows = xp[:, :, ki:ki + (hout - 1) * s + 1:s]
        for kj in range(k):
            np.maximum(out, rows[:, :, :, kj:kj + (wout - 1) * s + 1:s], out=out)
    return out


def linear_forward(x: np.ndarray, node: Linear) -> np.ndarray:
    if x.ndim == 4:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != node.in_features:
        raise GraphError(f"linear {node.name!r}: input width {x.shape[1]}, expects {node.in_features}")
    y = x @ node.weight.T
    if node.bias is not None:
        y = y + node.bias[None, :]
    return y.astype(DTYPE, copy=False)


def forward(net: NetworkSpec, batch: np.ndarray,
            taps: Iterable[str] = (),
            bn_mode: str = "inference",
            bn_stats_out: dict[str, tuple[np.ndarray, np.ndarray]] | None = None,
            ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the graph on a batch; returns (output, tapped activations).

    ``taps`` selects node outputs to capture: a Conv2d tap is the raw
    convolution output, before any following BatchNorm or ReLU.
    ``bn_mode="batch"`` makes BatchNorm nodes normalize by batch statistics
    (recording them into ``bn_stats_out``), which is only meaningful during
    running-stat recalibration.
    """
    if batch.dtype != DTYPE:
        raise GraphError(f"batch dtype {batch.dtype}, engine requires float32")
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise GraphError(f"batch shape {batch.shape} does not match input {net.input_shape}")
    taps = set(taps)
    unknown = taps - {n.name for n in net.nodes}
    if unknown:
        raise GraphError(f"tap names not in graph: {sorted(unknown)}")

    # reference counts so large intermediates are freed as soon as consumed
    remaining: dict[str, int] = {}
    for n in net.nodes:
        for ref in n.inputs:
            remaining[ref] = remaining.get(ref, 0) + 1

    values: dict[str, np.ndarray] = {INPUT: batch}
    tapped: dict[str, np.ndarray] = {}

    def fetch(name: str) -> np.ndarray:
        v = values[name]
        remaining[name] -= 1
        if remaining[name] == 0 and name != net.nodes[-1].name:
            del values[name]
        return v

    for node in net.nodes:
        args = [fetch(ref) for ref in node.inputs]
        if isinstance(node, Conv2d):
            y = conv2d_forward(args[0], node)
        elif isinstance(node, BatchNorm):
            if bn_mode == "batch":
                y, m, v = batchnorm_batch_forward(args[0], node)
                if bn_stats_out is not None:
                    bn_stats_out[node.name] = (m, v)
            else:
                y = batchnorm_forward(args[0], node)
        elif isinstance(node, ReLU):
            y = np.maximum(args[0], np.float32(0))
        elif isinstance(node, MaxPool):
            y = maxpool_forward(args[0], node)
        elif isinstance(node, GlobalAvgPool):
            y = args[0].mean(axis=(2, 3), dtype=DTYPE)
        elif isinstance(node, Linear):
            y = linear_forward(args[0], node)
        elif isinstance(node, Add):
            a, b = args
            if a.shape != b.shape:
                raise GraphError(f"add {node.name!r}: shapes {a.shape} vs {b.shape}")
            y = a + b
        else:  # pragma: no cover - exhaustive over NODE_KINDS
            raise GraphError(f"unknown node kind {node!r}")
        values[node.name] = y
        if node.name in taps:
            tapped[node.name] = y
    return values[net.nodes[-1].name], tapped


@dataclass
class ChannelStats:
    mean: np.ndarray
    var: np.ndarray
    count: int


def channel_stats(act: np.ndarray) -> ChannelStats:
    """Per-channel mean and population variance of an activation tensor.

    Accepts [N,C,H,W] or [N,C]; statistics pool the batch and any spatial
    positions. Raises on an empty batch.
    """
    if act.ndim not in (2, 4):
        raise ValueError(f"expected [N,C] or [N,C,H,W], got shape {act.shape}")
    if act.shape[0] == 0:
        raise ValueError("empty batch has no statistics")
    axes = (0, 2, 3) if act.ndim == 4 else (0,)
    count = int(np.prod([act.shape[i] for i in axes]))
    mean = act.mean(axis=axes, dtype=np.float64)
    var = np.square(act.astype(np.float64) - _expand(mean, act.ndim)).mean(axis=axes)
    return ChannelStats(mean=mean, var=var, count=count)


class StatsAccumulator:
    """Streaming per-channel mean/variance over a sequence of batches."""

    def __init__(self) -> None:
        self.count = 0
        self._sum: np.ndarray | None = None
        self._sumsq: np.ndarray | None = None

    def add(self, act: np.ndarray) -> None:
        axes = (0, 2, 3) if act.ndim == 4 else (0,)
        a64 = act.astype(np.float64)
        s = a64.sum(axis=axes)
        ss = np.square(a64).sum(axis=axes)
        n = int(np.prod([act.shape[i] for i in axes]))
        if self._sum is None:
            self._sum, self._sumsq = s, ss
        else:
            self._sum = self._sum + s
            self._sumsq = self._sumsq + ss
        self.count += n

    def finalize(self) -> ChannelStats:
        if self.count == 0 or self._sum is None:
            raise ValueError("no samples accumulated")
        mean = self._sum / self.count
        var = np.maximum(self._sumsq / self.count - mean * mean, 0.0)
        return ChannelStats(mean=mean, var=var, count=self.count)


def conv_nodes(net: NetworkSpec) -> list[Conv2d]:
    return [n for n in net.nodes if isinstance(n, Conv2d)]


def bn_after(net: NetworkSpec, conv_name: str) -> BatchNorm | None:
    """The BatchNorm node fed directly by the named conv, if any."""
    for n in net.nodes:
        if isinstance(n, BatchNorm) and n.inputs == [conv_name]:
            return n
    return None


def replace_conv_weights(net: NetworkSpec, updates: Mapping[str, tuple[np.ndarray, np.ndarray | None]]) -> NetworkSpec:
    """Copy of the net with (weight, bias) replaced for the named convs."""
    new_nodes: dict[str, LayerNode] = {}
    for name, (w, b) in updates.items():
        node = net.node(name)
        if not isinstance(node, Conv2d):
            raise GraphError(f"{name!r} is not a Conv2d node")
        w = np.ascontiguousarray(w, dtype=DTYPE)
        _freeze(w)
        if b is not None:
            b = np.ascontiguousarray(b, dtype=DTYPE)
            _freeze(b)
        new_nodes[name] = replace(node, weight=w, bias=b)
    return net.copy_with_nodes(new_nodes)
