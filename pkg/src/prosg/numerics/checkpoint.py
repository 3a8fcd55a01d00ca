"""Binary parameter container: JSON header plus raw little-endian tensor data.

Layout: 6-byte magic ``PROSG1``, uint64-LE header length, UTF-8 JSON header,
then the concatenated tensor payload. The header records each tensor's shape,
dtype, and byte offset into the payload, plus arbitrary ``meta`` JSON for
whatever structural state the caller wants alongside the weights.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import InputError

MAGIC = b"PROSG1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save(path, module: str, tensors: dict, meta: dict | None = None):
    """Write named arrays (numpy or Tensor) to ``path``."""
    header = {"version": 1, "module": module, "tensors": {}, "meta": meta or {}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr)
        if arr.dtype.name not in _DTYPES:
            raise InputError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        header["tensors"][name] = {
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load(path):
    """Read a container; returns (module, {name: ndarray}, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for name, info in header["tensors"].items():
        raw = payload[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[info["dtype"]]).astype(info["dtype"])
        tensors[name] = arr.reshape(info["shape"])
    return header["module"], tensors, header.get("meta", {})
