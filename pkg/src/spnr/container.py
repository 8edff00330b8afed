"""Binary container for network graphs, calibration batches, and masks.

Layout: magic ``SPNR`` (4 bytes), format version as u32 little-endian,
header byte length as u64 little-endian, a UTF-8 JSON header, then the
payload of raw tensor bytes concatenated in manifest order. Float tensors
are IEEE-754 float32 little-endian, row-major; mask tensors are u8.
"""
from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterable, Sequence

import numpy as np

from .engine import (Add, BatchNorm, Conv2d, GlobalAvgPool, LayerNode, Linear,
                     MaxPool, NetworkSpec, ReLU, freeze_params)

MAGIC = b"SPNR"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class ContainerError(ValueError):
    """Malformed container: bad magic, version, manifest, or payload."""


def _header_and_payload(blob: bytes) -> tuple[dict, memoryview]:
    if len(blob) < 16:
        raise ContainerError("file shorter than the fixed 16-byte prefix")
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    hlen, = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise ContainerError("header length exceeds file size")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"header is not valid UTF-8 JSON: {e}") from e
    return header, memoryview(blob)[16 + hlen:]


def _read_tensors(header: dict, payload: memoryview) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = _DTYPES.get(entry.get("dtype", "f32"))
        if dtype is None:
            raise ContainerError(f"tensor {name!r}: unknown dtype {entry.get('dtype')!r}")
        offset, length = entry["offset"], entry["length"]
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if length != want:
            raise ContainerError(
                f"tensor {name!r}: manifest length {length} != {want} for shape {shape}")
        if offset < 0 or offset + length > len(payload):
            raise ContainerError(f"tensor {name!r}: payload range out of bounds")
        arr = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(shape)
        tensors[name] = arr
    return tensors


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Low-level read: (header, tensors by name)."""
    with open(path, "rb") as f:
        blob = f.read()
    header, payload = _header_and_payload(blob)
    return header, _read_tensors(header, payload)


def write_container(path: str, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Low-level write; manifest order follows the ``tensors`` dict order."""
    manifest = []
    chunks: list[bytes] = []
    offset = 0
    for name, arr in tensors.items():
        if arr.dtype == np.uint8:
            dtype, a = "u8", np.ascontiguousarray(arr)
        else:
            dtype, a = "f32", np.ascontiguousarray(arr, dtype="<f4")
        raw = a.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "length": len(raw), "dtype": dtype})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header)
    header["tensors"] = manifest
    hbytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in chunks:
            f.write(raw)


def _node_meta(node: LayerNode) -> dict:
    d: dict = {"name": node.name, "kind": node.kind, "inputs": list(node.inputs)}
    if isinstance(node, Conv2d):
        d.update(out_ch=node.out_ch, in_ch=node.in_ch, kh=node.kh, kw=node.kw,
                 stride=node.stride, padding=node.padding, has_bias=node.bias is not None)
    elif isinstance(node, BatchNorm):
        d.update(eps=node.eps, momentum=node.momentum)
    elif isinstance(node, MaxPool):
        d.update(kernel=node.kernel, stride=node.stride, padding=node.padding)
    elif isinstance(node, Linear):
        d.update(out_features=node.out_features, in_features=node.in_features,
                 has_bias=node.bias is not None)
    return d


def save_network(path: str, net: NetworkSpec,
                 extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Serialize a graph (plus optional extra tensors such as masks)."""
    header = {
        "input_shape": list(net.input_shape),
        "first_conv": net.first_conv,
        "prunable": list(net.prunable),
        "nodes": [_node_meta(n) for n in net.nodes],
    }
    if net.meta:
        header["meta"] = net.meta
    tensors: dict[str, np.ndarray] = {}
    for n in net.nodes:
        if isinstance(n, (Conv2d, Linear)):
            tensors[f"{n.name}/weight"] = n.weight
            if n.bias is not None:
                tensors[f"{n.name}/bias"] = n.bias
        elif isinstance(n, BatchNorm):
            tensors[f"{n.name}/gamma"] = n.gamma
            tensors[f"{n.name}/beta"] = n.beta
            tensors[f"{n.name}/running_mean"] = n.running_mean
            tensors[f"{n.name}/running_var"] = n.running_var
    for name, arr in (extra_tensors or {}).items():
        tensors[name] = arr
    write_container(path, header, tensors)


def _take(tensors: dict[str, np.ndarray], name: str, node: str) -> np.ndarray:
    try:
        t = tensors[name]
    except KeyError:
        raise ContainerError(f"node {node!r}: missing tensor {name!r}") from None
    if t.dtype != np.dtype("<f4"):
        raise ContainerError(f"tensor {name!r}: graph parameters must be f32")
    return t.astype(np.float32, copy=False)


def load_network(path: str) -> NetworkSpec:
    """Deserialize a graph container into an immutable NetworkSpec."""
    header, tensors = read_container(path)
    if "nodes" not in header:
        raise ContainerError("container holds no graph (no 'nodes' in header)")
    nodes: list[LayerNode] = []
    for meta in header["nodes"]:
        kind, name, inputs = meta["kind"], meta["name"], list(meta["inputs"])
        if kind == "Conv2d":
            bias = _take(tensors, f"{name}/bias", name) if meta.get("has_bias") else None
            nodes.append(Conv2d(name, inputs, meta["out_ch"], meta["in_ch"],
                                meta["kh"], meta["kw"], meta["stride"], meta["padding"],
                                _take(tensors, f"{name}/weight", name), bias))
        elif kind == "BatchNorm":
            nodes.append(BatchNorm(name, inputs,
                                   _take(tensors, f"{name}/gamma", name),
                                   _take(tensors, f"{name}/beta", name),
                                   _take(tensors, f"{name}/running_mean", name),
                                   _take(tensors, f"{name}/running_var", name),
                                   eps=meta.get("eps", 1e-5),
                                   momentum=meta.get("momentum", 0.1)))
        elif kind == "ReLU":
            nodes.append(ReLU(name, inputs))
        elif kind == "MaxPool":
            nodes.append(MaxPool(name, inputs, meta["kernel"], meta["stride"],
                                 meta.get("padding", 0)))
        elif kind == "GlobalAvgPool":
            nodes.append(GlobalAvgPool(name, inputs))
        elif kind == "Linear":
            bias = _take(tensors, f"{name}/bias", name) if meta.get("has_bias") else None
            nodes.append(Linear(name, inputs, meta["out_features"], meta["in_features"],
                                _take(tensors, f"{name}/weight", name), bias))
        elif kind == "Add":
            nodes.append(Add(name, inputs))
        else:
            raise ContainerError(f"node {name!r}: unknown kind {kind!r}")
    net = NetworkSpec(nodes, tuple(header["input_shape"]), list(header["prunable"]),
                      header["first_conv"], header.get("meta", {}))
    return freeze_params(net)


def save_batches(path: str, batches: Sequence[np.ndarray], meta: dict | None = None) -> None:
    """Write calibration/evaluation batches as tensors named ``batch/<i>``."""
    if not batches:
        raise ContainerError("refusing to write a container with zero batches")
    header: dict = {"input_shape": list(batches[0].shape[1:])}
    if meta:
        header["meta"] = meta
    tensors = {f"batch/{i}": np.asarray(b, dtype=np.float32) for i, b in enumerate(batches)}
    write_container(path, header, tensors)


def load_batches(path: str) -> tuple[list[np.ndarray], dict]:
    """Read ``batch/<i>`` tensors in index order; returns (batches, meta)."""
    header, tensors = read_container(path)
    idx = []
    for name in tensors:
        if name.startswith("batch/"):
            try:
                idx.append(int(name.split("/", 1)[1]))
            except ValueError:
                raise ContainerError(f"malformed batch tensor name {name!r}") from None
    if not idx:
        raise ContainerError("container holds no batch/<i> tensors")
    idx.sort()
    if idx != list(range(len(idx))):
        raise ContainerError(f"batch indices not contiguous from 0: {idx}")
    batches = [np.asarray(tensors[f"batch/{i}"], dtype=np.float32) for i in idx]
    for b in batches:
        b.flags.writeable = False
    return batches, header.get("meta", {})


def save_masks(path: str, masks: dict[str, np.ndarray]) -> None:
    tensors = {f"mask/{layer}": np.asarray(m, dtype=np.uint8) for layer, m in masks.items()}
    write_container(path, {"content": "masks"}, tensors)


def load_masks(path: str) -> dict[str, np.ndarray]:
    _, tensors = read_container(path)
    masks = {}
    for name, arr in tensors.items():
        if name.startswith("mask/"):
            if arr.dtype != np.uint8:
                raise ContainerError(f"mask tensor {name!r} must be u8")
            masks[name.split("/", 1)[1]] = arr
    if not masks:
        raise ContainerError("container holds no mask/<layer> tensors")
    return masks


def save_labels(path: str, labels: np.ndarray) -> None:
    write_container(path, {"content": "labels"},
                    {"labels": np.asarray(labels, dtype=np.float32)})


def load_labels(path: str) -> np.ndarray:
    _, tensors = read_container(path)
    if "labels" not in tensors:
        raise ContainerError("container holds no 'labels' tensor")
    return np.asarray(tensors["labels"], dtype=np.float32)


def batches_fingerprint(batches: Iterable[np.ndarray]) -> str:
    """Stable identity for a calibration set: sha256 over shapes and bytes."""
    h = hashlib.sha256()
    for b in batches:
        h.update(str(b.shape).encode())
        h.update(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return h.hexdigest()
