"""Writer for the SPNR binary container format.

The consuming toolkit documents the layout: 4-byte magic ``SPNR``, format
version as u32 little-endian, header byte length as u64 little-endian, a
compact UTF-8 JSON header, then tensor bytes concatenated in manifest
order (float tensors are IEEE-754 f32 little-endian row-major, masks u8).
The bytes are the contract, so this module implements the format directly
instead of depending on the toolkit.
"""
from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SPNR"
VERSION = 1


def write_container(path: str, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Write one container; manifest order follows the ``tensors`` mapping order."""
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
