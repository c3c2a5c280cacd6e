"""Versioned binary container: magic, JSON header, raw little-endian arrays.

Bytes depend only on the header and array contents, so files written from
identical models are identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PHENOICU"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        return a.astype(a.dtype.newbyteorder("<"))
    return a


def dumps_container(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = _le(np.asarray(arrays[name]))
        if a.dtype == object:
            raise ContainerError(f"array {name!r} has object dtype")
        order = "F" if a.ndim > 1 and a.flags.f_contiguous and not a.flags.c_contiguous else "C"
        raw = a.tobytes(order=order)
        pad = (-len(raw)) % 8
        specs.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "order": order,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    meta = json.dumps({"format_version": FORMAT_VERSION, "header": header, "arrays": specs},
                      sort_keys=True, separators=(",", ":")).encode()
    meta += b" " * ((-len(meta)) % 8)
    return MAGIC + struct.pack("<Q", len(meta)) + meta + b"".join(blobs)


def loads_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not a phenoicu container (bad magic)")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    meta = json.loads(data[start:start + n].decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {meta.get('format_version')}")
    base = start + n
    arrays = {}
    for s in meta["arrays"]:
        raw = data[base + s["offset"]: base + s["offset"] + s["nbytes"]]
        a = np.frombuffer(raw, dtype=np.dtype(s["dtype"]))
        arrays[s["name"]] = a.reshape(s["shape"], order=s["order"]).copy()
    return meta["header"], arrays


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_container(header, arrays))


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads_container(Path(path).read_bytes())
