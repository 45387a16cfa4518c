"""Binary checkpoint format.

Layout: magic "NAFCKPT1", uint32 LE header length, UTF-8 JSON header,
then raw little-endian float32 payload, tensors in header order.  The
header records {"version": 1, "modules": [...], "tensors": [{"name",
"shape"}], "dtype": "float32", "extra": {...}}.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NAFCKPT1"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_arrays, modules=(), extra=None):
    """named_arrays: iterable of (name, numpy array or Tensor)."""
    entries = []
    payload = []
    for name, arr in named_arrays:
        data = getattr(arr, "data", arr)
        data = np.ascontiguousarray(data, dtype=np.float32)
        entries.append({"name": name, "shape": list(data.shape)})
        payload.append(data)
    header = {
        "version": VERSION,
        "modules": list(modules),
        "tensors": entries,
        "dtype": "float32",
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for data in payload:
            f.write(data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (header dict, {name: float32 array})."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {header.get('version')}"
        )
    off += hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: truncated payload at tensor '{entry['name']}'"
            )
        tensors[entry["name"]] = np.frombuffer(
            raw, dtype="<f4", count=count, offset=off
        ).reshape(shape).copy()
        off += nbytes
    return header, tensors
