"""Torchvision architectures written out in the toolkit's node schema.

Each builder walks a checkpoint state dict and collects three things:
JSON-ready node metadata, the named parameter tensors, and the
framework-module to node-name mapping recorded in the export manifest.
Node names follow the torch module paths so exported layers keep their
familiar identities (layer2.0.downsample.0, features.14, ...).
"""
from __future__ import annotations

import numpy as np

ARCHS = ("resnet18", "resnet34", "vgg16_bn")

_RESNET_STAGES = {"resnet18": (2, 2, 2, 2), "resnet34": (3, 4, 6, 3)}
_STAGE_CH = (64, 128, 256, 512)

# cfg "D" of the VGG family; "M" is a 2x2/2 max pool
_VGG16 = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
          512, 512, 512, "M", 512, 512, 512, "M")


class ExportError(ValueError):
    """Unknown architecture or missing/misshapen checkpoint parameter."""


def _param(state, key: str, shape=None) -> np.ndarray:
    try:
        t = state[key]
    except KeyError:
        raise ExportError(f"missing parameter {key!r}") from None
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t, dtype="<f4")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ExportError(
            f"parameter {key!r}: shape {tuple(arr.shape)}, expected {tuple(shape)}")
    return arr


class GraphBuilder:
    """Accumulates node metadata, tensors, and the module mapping."""

    def __init__(self, state) -> None:
        self.state = state
        self.nodes: list[dict] = []
        self.tensors: dict[str, np.ndarray] = {}
        self.mapping: dict[str, str] = {}

    def conv(self, name, src, out_ch, in_ch, k, stride, padding, bias) -> str:
        self.nodes.append({"name": name, "kind": "Conv2d", "inputs": [src],
                           "out_ch": out_ch, "in_ch": in_ch, "kh": k, "kw": k,
                           "stride": stride, "padding": padding, "has_bias": bias})
        self.tensors[f"{name}/weight"] = _param(self.state, f"{name}.weight",
                                                (out_ch, in_ch, k, k))
        if bias:
            self.tensors[f"{name}/bias"] = _param(self.state, f"{name}.bias", (out_ch,))
        self.mapping[name] = name
        return name

    def bn(self, name, src, ch) -> str:
        self.nodes.append({"name": name, "kind": "BatchNorm", "inputs": [src],
                           "eps": 1e-5, "momentum": 0.1})
        for torch_key, spnr_key in (("weight", "gamma"), ("bias", "beta"),
                                    ("running_mean", "running_mean"),
                                    ("running_var", "running_var")):
            self.tensors[f"{name}/{spnr_key}"] = _param(
                self.state, f"{name}.{torch_key}", (ch,))
        self.mapping[name] = name
        return name

    def linear(self, name, src, weight, bias) -> str:
        out_f, in_f = weight.shape
        self.nodes.append({"name": name, "kind": "Linear", "inputs": [src],
                           "out_features": int(out_f), "in_features": int(in_f),
                           "has_bias": bias is not None})
        self.tensors[f"{name}/weight"] = weight
        if bias is not None:
            self.tensors[f"{name}/bias"] = bias
        self.mapping[name] = name
        return name

    def relu(self, name, src) -> str:
        self.nodes.append({"name": name, "kind": "ReLU", "inputs": [src]})
        return name

    def maxpool(self, name, src, kernel, stride, padding) -> str:
        self.nodes.append({"name": name, "kind": "MaxPool", "inputs": [src],
                           "kernel": kernel, "stride": stride, "padding": padding})
        return name

    def gap(self, name, src) -> str:
        self.nodes.append({"name": name, "kind": "GlobalAvgPool", "inputs": [src]})
        return name

    def add(self, name, a, b) -> str:
        self.nodes.append({"name": name, "kind": "Add", "inputs": [a, b]})
        return name

    def conv_names(self) -> list[str]:
        return [n["name"] for n in self.nodes if n["kind"] == "Conv2d"]

    def parameterized(self) -> list[str]:
        return [n["name"] for n in self.nodes
                if n["kind"] in ("Conv2d", "BatchNorm", "Linear")]


def resnet_graph(state, arch: str, input_size: int) -> tuple[GraphBuilder, list[str], str]:
    """Basic-block residual net; returns (builder, prunable, first_conv)."""
    if input_size < 32:
        raise ExportError(f"{arch} needs input size >= 32, got {input_size}")
    g = GraphBuilder(state)
    x = g.conv("conv1", "input", 64, 3, 7, 2, 3, bias=False)
    x = g.bn("bn1", x, 64)
    x = g.relu("relu", x)
    x = g.maxpool("maxpool", x, 3, 2, 1)
    in_ch = 64
    for si, (n_blocks, ch) in enumerate(zip(_RESNET_STAGES[arch], _STAGE_CH), start=1):
        for b in range(n_blocks):
            pfx = f"layer{si}.{b}"
            stride = 2 if si > 1 and b == 0 else 1
            identity = x
            y = g.conv(f"{pfx}.conv1", x, ch, in_ch, 3, stride, 1, bias=False)
            y = g.bn(f"{pfx}.bn1", y, ch)
            y = g.relu(f"{pfx}.relu1", y)
            y = g.conv(f"{pfx}.conv2", y, ch, ch, 3, 1, 1, bias=False)
            y = g.bn(f"{pfx}.bn2", y, ch)
            if stride != 1 or in_ch != ch:
                identity = g.conv(f"{pfx}.downsample.0", identity, ch, in_ch,
                                  1, stride, 0, bias=False)
                identity = g.bn(f"{pfx}.downsample.1", identity, ch)
            y = g.add(f"{pfx}.add", y, identity)
            x = g.relu(f"{pfx}.relu2", y)
            in_ch = ch
    x = g.gap("avgpool", x)
    w = _param(state, "fc.weight")
    if w.ndim != 2 or w.shape[1] != 512:
        raise ExportError(f"parameter 'fc.weight': shape {tuple(w.shape)}, "
                          f"expected (num_classes, 512)")
    g.linear("fc", x, w, _param(state, "fc.bias", (w.shape[0],)))
    prunable = [c for c in g.conv_names() if c != "conv1"]
    return g, prunable, "conv1"


def vgg16_bn_graph(state, input_size: int) -> tuple[GraphBuilder, list[str], str]:
    """VGG16 with batch norm; returns (builder, prunable, first_conv).

    Dropout modules (classifier.2, classifier.5) are identities at inference
    and are dropped from the graph. The torch adaptive 7x7 average pool has
    two exact translations: at input 224 the feature map is already 7x7 and
    the pool is the identity, so features feed the flattening classifier
    Linear directly; at input 32 the feature map is 1x1 and the pool
    replicates one value into all 49 cells, so a global average pool plus a
    classifier whose 49 columns per channel are summed computes the same
    function.
    """
    if input_size % 32 != 0 or input_size // 32 not in (1, 7):
        raise ExportError("vgg16_bn export supports input sizes 32 "
                          "(folded classifier head) and 224")
    g = GraphBuilder(state)
    x = "input"
    idx = 0
    in_ch = 3
    first = None
    for v in _VGG16:
        if v == "M":
            x = g.maxpool(f"features.{idx}", x, 2, 2, 0)
            idx += 1
            continue
        name = f"features.{idx}"
        x = g.conv(name, x, v, in_ch, 3, 1, 1, bias=True)
        first = first or name
        x = g.bn(f"features.{idx + 1}", x, v)
        x = g.relu(f"features.{idx + 2}", x)
        idx += 3
        in_ch = v
    w0 = _param(state, "classifier.0.weight")
    if w0.ndim != 2 or w0.shape[1] != 512 * 49:
        raise ExportError(f"parameter 'classifier.0.weight': shape "
                          f"{tuple(w0.shape)}, expected (hidden, {512 * 49})")
    b0 = _param(state, "classifier.0.bias", (w0.shape[0],))
    if input_size == 32:
        x = g.gap("avgpool", x)
        # exact: every channel's 49 flattened columns see the same value
        w0 = w0.reshape(w0.shape[0], 512, 49).astype(np.float64).sum(axis=2)
        w0 = w0.astype("<f4")
    x = g.linear("classifier.0", x, w0, b0)
    x = g.relu("classifier.1", x)
    w3 = _param(state, "classifier.3.weight")
    if w3.ndim != 2 or w3.shape[1] != b0.shape[0]:
        raise ExportError(f"parameter 'classifier.3.weight': shape "
                          f"{tuple(w3.shape)}, expected (hidden, {b0.shape[0]})")
    x = g.linear("classifier.3", x, w3, _param(state, "classifier.3.bias", (w3.shape[0],)))
    x = g.relu("classifier.4", x)
    w6 = _param(state, "classifier.6.weight")
    if w6.ndim != 2 or w6.shape[1] != w3.shape[0]:
        raise ExportError(f"parameter 'classifier.6.weight': shape "
                          f"{tuple(w6.shape)}, expected (num_classes, {w3.shape[0]})")
    g.linear("classifier.6", x, w6, _param(state, "classifier.6.bias", (w6.shape[0],)))
    prunable = [c for c in g.conv_names() if c != first]
    return g, prunable, first
