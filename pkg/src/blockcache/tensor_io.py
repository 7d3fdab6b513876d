"""Binary tensor dumps and named-tensor bundles.

Dump layout (all little-endian): rank as unsigned 64-bit, then each
dimension as unsigned 64-bit, then the values as 64-bit IEEE floats in
row-major order.

A bundle packs several named dumps into one file behind a length-framed
JSON manifest: unsigned 64-bit manifest byte length, the UTF-8 manifest
(``{"meta": {...}, "tensors": [{"name", "shape"}, ...]}``), then the
dumps in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_U64 = np.dtype("<u8")
_F64 = np.dtype("<f8")


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    header = np.empty(1 + arr.ndim, dtype=_U64)
    header[0] = arr.ndim
    header[1:] = arr.shape
    return header.tobytes() + np.ascontiguousarray(arr, dtype=_F64).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one dump starting at ``offset``; returns (array, next offset)."""
    rank = int(np.frombuffer(buf, dtype=_U64, count=1, offset=offset)[0])
    offset += 8
    dims = np.frombuffer(buf, dtype=_U64, count=rank, offset=offset).astype(np.int64)
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(buf, dtype=_F64, count=count, offset=offset)
    offset += 8 * count
    return data.reshape(dims).copy(), offset


def dump_nbytes(shape) -> int:
    """On-disk size of one dump with the given shape."""
    shape = tuple(int(s) for s in shape)
    count = 1
    for s in shape:
        count *= s
    return 8 * (1 + len(shape)) + 8 * count


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def bundle_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = {
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(np.asarray(a).shape)} for name, a in tensors.items()
        ],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = np.array([len(mbytes)], dtype=_U64).tobytes()
    body = b"".join(tensor_bytes(a) for a in tensors.values())
    return head + mbytes + body


def write_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(bundle_bytes(tensors, meta))


def read_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    mlen = int(np.frombuffer(buf, dtype=_U64, count=1)[0])
    manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    offset = 8 + mlen
    for entry in manifest["tensors"]:
        arr, offset = tensor_from_bytes(buf, offset)
        expect = tuple(entry["shape"])
        if arr.shape != expect:
            raise IOError(f"bundle entry {entry['name']!r}: shape {arr.shape} != manifest {expect}")
        tensors[entry["name"]] = arr
    return tensors, manifest["meta"]
