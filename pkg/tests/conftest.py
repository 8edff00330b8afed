"""Shared builders for hand-sized nets, batches, and a reference shape table."""
from __future__ import annotations

import math

import numpy as np
import pytest

from spnr import BatchNorm, Conv2d, NetworkSpec


def f32(a):
    return np.ascontiguousarray(np.asarray(a), dtype=np.float32)


def identity_bn(name, inputs, width, eps=1e-5):
    return BatchNorm(name, inputs, gamma=f32(np.ones(width)),
                     beta=f32(np.zeros(width)),
                     running_mean=f32(np.zeros(width)),
                     running_var=f32(np.ones(width)), eps=eps)


def single_conv_net(weight, bias=None, stride=1, padding=0, input_hw=(4, 4),
                    with_bn=False):
    """One conv named 'conv', optionally followed by an identity BatchNorm."""
    w = f32(weight)
    out_ch, in_ch, kh, kw = w.shape
    nodes = [Conv2d("conv", ["input"], out_ch, in_ch, kh, kw, stride, padding,
                    w, None if bias is None else f32(bias))]
    if with_bn:
        nodes.append(identity_bn("bn", ["conv"], out_ch))
    return NetworkSpec(nodes, (in_ch, *input_hw), [], "conv")


def rand_batches(seed, n_batches, batch, shape):
    rng = np.random.default_rng(seed)
    return [f32(rng.standard_normal((batch, *shape)))
            for _ in range(n_batches)]


# Prunable conv shapes of a standard 18-layer residual classifier
# (stem and fully connected head excluded). Used as a realistic, fixed
# allocation workload: 11,157,504 prunable weights.
RESNET18_SHAPES = {
    "layer1.0.conv1": (64, 64, 3, 3),
    "layer1.0.conv2": (64, 64, 3, 3),
    "layer1.1.conv1": (64, 64, 3, 3),
    "layer1.1.conv2": (64, 64, 3, 3),
    "layer2.0.conv1": (128, 64, 3, 3),
    "layer2.0.conv2": (128, 128, 3, 3),
    "layer2.0.downsample.0": (128, 64, 1, 1),
    "layer2.1.conv1": (128, 128, 3, 3),
    "layer2.1.conv2": (128, 128, 3, 3),
    "layer3.0.conv1": (256, 128, 3, 3),
    "layer3.0.conv2": (256, 256, 3, 3),
    "layer3.0.downsample.0": (256, 128, 1, 1),
    "layer3.1.conv1": (256, 256, 3, 3),
    "layer3.1.conv2": (256, 256, 3, 3),
    "layer4.0.conv1": (512, 256, 3, 3),
    "layer4.0.conv2": (512, 512, 3, 3),
    "layer4.0.downsample.0": (512, 256, 1, 1),
    "layer4.1.conv1": (512, 512, 3, 3),
    "layer4.1.conv2": (512, 512, 3, 3),
}

RESNET18_COUNTS = {l: math.prod(sh) for l, sh in RESNET18_SHAPES.items()}


@pytest.fixture(scope="session")
def toy_net():
    from spnr import gen_toynet
    return gen_toynet(seed=0, blocks=2, channels=8, input_shape=(3, 8, 8))


@pytest.fixture(scope="session")
def toy_calib():
    return rand_batches(seed=11, n_batches=2, batch=8, shape=(3, 8, 8))
