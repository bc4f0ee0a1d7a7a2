"""On-disk tensor format and the keyed multi-tensor container.

A single tensor is a little-endian uint32 header length, a JSON header
``{"shape": [...], "dtype": "float32"}``, then the raw row-major bytes
(little-endian). A container prepends one JSON index describing every keyed
entry plus free-form metadata, followed by the entries' raw bytes in index
order. Round trips are bit-for-bit.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("|u1"),
}
_NAMES = {v: k for k, v in _DTYPES.items()}

CONTAINER_FORMAT = "smagnet-tensors"
CONTAINER_VERSION = 1


def _dtype_name(arr: np.ndarray) -> str:
    key = np.dtype(arr.dtype.name)
    for name, dt in _DTYPES.items():
        if key == dt or arr.dtype.name == name:
            return name
    raise ValueError(f"unsupported tensor dtype {arr.dtype} (use float32/float64/uint8)")


def _raw(arr: np.ndarray) -> bytes:
    name = _dtype_name(arr)
    return np.ascontiguousarray(arr).astype(_DTYPES[name], copy=False).tobytes(order="C")


def _header(blob: dict) -> bytes:
    payload = json.dumps(blob, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


def _read_header(f) -> dict:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("tensor file truncated: missing header length")
    (n,) = struct.unpack("<I", raw)
    payload = f.read(n)
    if len(payload) != n:
        raise ValueError("tensor file truncated: incomplete header")
    return json.loads(payload.decode("utf-8"))


def _atomic(path, chunks) -> None:
    # Partial files must never be observable at the final name.
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)


def write_tensor(path, arr: np.ndarray) -> None:
    name = _dtype_name(arr)
    _atomic(path, [_header({"shape": list(arr.shape), "dtype": name}), _raw(arr)])


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = _read_header(f)
        return _read_entry(f, head, str(path))


def _read_entry(f, head: dict, label: str) -> np.ndarray:
    name = head.get("dtype")
    if name not in _DTYPES:
        raise ValueError(f"{label}: unknown dtype {name!r} in header")
    shape = tuple(int(s) for s in head["shape"])
    dt = _DTYPES[name]
    want = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    raw = f.read(want)
    if len(raw) != want:
        raise ValueError(f"{label}: truncated payload, expected {want} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def write_container(path, entries: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "meta": meta or {},
        "entries": [
            {"key": k, "shape": list(v.shape), "dtype": _dtype_name(v)}
            for k, v in entries.items()
        ],
    }
    def chunks():
        yield _header(index)
        for v in entries.values():
            yield _raw(v)

    _atomic(path, chunks())


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        index = _read_header(f)
        if index.get("format") != CONTAINER_FORMAT:
            raise ValueError(f"{path}: not a {CONTAINER_FORMAT} container")
        if index.get("version") != CONTAINER_VERSION:
            raise ValueError(
                f"{path}: container version {index.get('version')} != {CONTAINER_VERSION}"
            )
        out = {}
        for ent in index["entries"]:
            out[ent["key"]] = _read_entry(f, ent, f"{path}:{ent['key']}")
        return out, index.get("meta", {})
