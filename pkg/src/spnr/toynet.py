"""Seeded residual toy networks for desk-scale experiments."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .engine import (INPUT, Add, BatchNorm, Conv2d, GlobalAvgPool, Linear,
                     MaxPool, NetworkSpec, ReLU, forward, freeze_params)


def _conv_weight(rng: np.random.Generator, out_ch: int, in_ch: int,
                 kh: int, kw: int) -> np.ndarray:
    fan_in = in_ch * kh * kw
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kh, kw))
    return w.astype(np.float32)


def init_bn_stats(net: NetworkSpec, batches: list[np.ndarray]) -> NetworkSpec:
    """Set every BatchNorm's running stats from one batch-mode pass.

    After this, inference on the initializing data reproduces the batch-mode
    activations, which makes later recalibration on the same data a fixed
    point (self-consistent dense net).
    """
    if len(batches) != 1:
        raise ValueError("initialization uses exactly one pass, give one batch")
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    forward(net, np.ascontiguousarray(batches[0], dtype=np.float32),
            bn_mode="batch", bn_stats_out=stats)
    new_nodes = {}
    for n in net.nodes:
        if isinstance(n, BatchNorm):
            bm, bv = stats[n.name]
            rm = bm.astype(np.float32)
            rv = bv.astype(np.float32)
            rm.flags.writeable = False
            rv.flags.writeable = False
            new_nodes[n.name] = replace(n, running_mean=rm, running_var=rv)
    return net.copy_with_nodes(new_nodes)


def gen_toynet(seed: int, blocks: int = 2, channels: int = 8,
               with_projections: bool = True,
               input_shape: tuple[int, int, int] = (3, 8, 8),
               classes: int = 10) -> NetworkSpec:
    """Small residual CNN with seeded weights and self-consistent BN stats.

    ``with_projections`` doubles the width and strides at every block after
    the first, adding 1x1 projection convs (named with "downsample") on the
    shortcut; without it every block keeps the stem width and an identity
    shortcut. The stem conv is dense; all other convs are prunable.
    """
    if blocks < 1:
        raise ValueError("need at least one block")
    rng = np.random.default_rng(seed)
    c_in = input_shape[0]
    nodes: list = []
    prunable: list[str] = []

    def bn(name: str, inputs: list[str], width: int) -> BatchNorm:
        return BatchNorm(name, inputs,
                         gamma=np.ones(width, dtype=np.float32),
                         beta=np.zeros(width, dtype=np.float32),
                         running_mean=np.zeros(width, dtype=np.float32),
                         running_var=np.ones(width, dtype=np.float32))

    nodes.append(Conv2d("stem", [INPUT], channels, c_in, 3, 3, 1, 1,
                        _conv_weight(rng, channels, c_in, 3, 3)))
    nodes.append(bn("stem_bn", ["stem"], channels))
    nodes.append(ReLU("stem_relu", ["stem_bn"]))

    prev = "stem_relu"
    width = channels
    for b in range(blocks):
        pfx = f"block{b}"
        if with_projections and b > 0:
            out_w, stride = width * 2, 2
        else:
            out_w, stride = width, 1
        nodes.append(Conv2d(f"{pfx}.conv1", [prev], out_w, width, 3, 3, stride, 1,
                            _conv_weight(rng, out_w, width, 3, 3)))
        prunable.append(f"{pfx}.conv1")
        nodes.append(bn(f"{pfx}.bn1", [f"{pfx}.conv1"], out_w))
        nodes.append(ReLU(f"{pfx}.relu1", [f"{pfx}.bn1"]))
        nodes.append(Conv2d(f"{pfx}.conv2", [f"{pfx}.relu1"], out_w, out_w, 3, 3, 1, 1,
                            _conv_weight(rng, out_w, out_w, 3, 3)))
        prunable.append(f"{pfx}.conv2")
        nodes.append(bn(f"{pfx}.bn2", [f"{pfx}.conv2"], out_w))
        if out_w != width or stride != 1:
            nodes.append(Conv2d(f"{pfx}.downsample", [prev], out_w, width, 1, 1,
                                stride, 0, _conv_weight(rng, out_w, width, 1, 1)))
            prunable.append(f"{pfx}.downsample")
            nodes.append(bn(f"{pfx}.downsample_bn", [f"{pfx}.downsample"], out_w))
            shortcut = f"{pfx}.downsample_bn"
        else:
            shortcut = prev
        nodes.append(Add(f"{pfx}.add", [f"{pfx}.bn2", shortcut]))
        nodes.append(ReLU(f"{pfx}.relu2", [f"{pfx}.add"]))
        prev = f"{pfx}.relu2"
        width = out_w

    nodes.append(GlobalAvgPool("gap", [prev]))
    nodes.append(Linear("fc", ["gap"], classes, width,
                        rng.normal(0.0, np.sqrt(1.0 / width),
                                   size=(classes, width)).astype(np.float32),
                        np.zeros(classes, dtype=np.float32)))

    net = NetworkSpec(nodes, tuple(input_shape), prunable, "stem",
                      meta={"generator": "toynet", "seed": int(seed)})
    init_batch = rng.normal(0.0, 1.0, size=(32, *input_shape)).astype(np.float32)
    net = init_bn_stats(net, [init_batch])
    return freeze_params(net)


def gen_batches(seed: int, images: int, batch_size: int,
                input_shape: tuple[int, int, int] = (3, 8, 8)) -> list[np.ndarray]:
    """Seeded standard-normal image batches."""
    if images < 1 or batch_size < 1:
        raise ValueError("need at least one image and a positive batch size")
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, 1.0, size=(images, *input_shape)).astype(np.float32)
    return [data[i:i + batch_size] for i in range(0, images, batch_size)]


def gen_labels(seed: int, images: int, classes: int = 10) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, classes, size=images).astype(np.float32)
