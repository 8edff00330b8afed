"""Checkpoint and image-batch export into SPNR containers."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .format import write_container
from .graphs import ARCHS, ExportError, resnet_graph, vgg16_bn_graph

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExportManifest:
    """What went into an exported model container.

    ``mapping`` sends each framework module path to the node carrying its
    parameters; it is a bijection onto the parameterized node list. The
    normalization constants ride along so the consuming toolkit never has
    to guess how image batches were preprocessed.
    """
    arch: str
    checkpoint_sha256: str
    source: str
    mapping: dict[str, str] = field(default_factory=dict)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    folded_head: bool = False

    def validate(self, parameterized: list[str]) -> None:
        values = list(self.mapping.values())
        if len(set(values)) != len(values) or sorted(values) != sorted(parameterized):
            raise ExportError("manifest mapping must be a bijection onto the "
                              "parameterized node list")

    def to_json(self) -> dict:
        return {"arch": self.arch, "checkpoint_sha256": self.checkpoint_sha256,
                "source": self.source, "mapping": dict(self.mapping),
                "normalization": {"mean": [float(m) for m in self.mean],
                                  "std": [float(s) for s in self.std]},
                "folded_head": self.folded_head}


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_state(path: str) -> dict:
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, dict) and isinstance(obj.get("state_dict"), dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise ExportError(f"checkpoint {path!r} holds no state dict")
    return {k.removeprefix("module."): v for k, v in obj.items()}


def export_model(ckpt_path: str, arch: str, out_path: str, *,
                 input_size: int = 32,
                 mean: tuple[float, ...] = IMAGENET_MEAN,
                 std: tuple[float, ...] = IMAGENET_STD) -> ExportManifest:
    """Serialize a checkpoint as a toolkit-loadable model container."""
    if arch not in ARCHS:
        raise ExportError(f"unknown architecture {arch!r}; supported: {ARCHS}")
    state = _load_state(ckpt_path)
    if arch == "vgg16_bn":
        g, prunable, first = vgg16_bn_graph(state, input_size)
    else:
        g, prunable, first = resnet_graph(state, arch, input_size)
    manifest = ExportManifest(arch, _sha256(ckpt_path), os.path.basename(ckpt_path),
                              g.mapping, tuple(mean), tuple(std),
                              folded_head=(arch == "vgg16_bn" and input_size == 32))
    manifest.validate(g.parameterized())
    header = {
        "input_shape": [3, input_size, input_size],
        "first_conv": first,
        "prunable": prunable,
        "nodes": g.nodes,
        "meta": {"export": manifest.to_json()},
    }
    write_container(out_path, header, g.tensors)
    return manifest


def export_batches(images: np.ndarray, out_path: str, *, batch_size: int = 64,
                   mean: tuple[float, ...] = IMAGENET_MEAN,
                   std: tuple[float, ...] = IMAGENET_STD,
                   source: str | None = None) -> int:
    """Normalize images, split into batches, write one container.

    Accepts [N,3,H,W] or [N,H,W,3]; uint8 inputs are scaled to [0,1] before
    the per-channel (x - mean) / std. Returns the number of batches written.
    """
    x = np.asarray(images)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ExportError(f"expected a non-empty [N,3,H,W] or [N,H,W,3] "
                          f"image array, got shape {tuple(x.shape)}")
    if x.shape[1] != 3 and x.shape[3] == 3:
        x = np.transpose(x, (0, 3, 1, 2))
    if x.shape[1] != 3:
        raise ExportError(f"expected 3-channel images, got shape {tuple(x.shape)}")
    if batch_size < 1:
        raise ExportError(f"batch size must be >= 1, got {batch_size}")
    if len(mean) != 3 or len(std) != 3:
        raise ExportError("mean and std need one value per channel")
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255)
    x = x.astype(np.float32, copy=False)
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    x = (x - m) / s
    header: dict = {"input_shape": list(x.shape[1:]),
                    "meta": {"normalization": {"mean": [float(v) for v in mean],
                                               "std": [float(v) for v in std]},
                             "count": int(x.shape[0])}}
    if source:
        header["meta"]["source"] = source
    tensors = {f"batch/{i}": x[lo:lo + batch_size]
               for i, lo in enumerate(range(0, x.shape[0], batch_size))}
    write_container(out_path, header, tensors)
    return len(tensors)


def export_labels(labels: np.ndarray, out_path: str) -> None:
    """Write class labels as a separate evaluation-only container."""
    y = np.asarray(labels, dtype=np.float32).reshape(-1)
    if y.size == 0:
        raise ExportError("no labels to export")
    write_container(out_path, {"content": "labels"}, {"labels": y})
