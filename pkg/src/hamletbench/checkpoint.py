"""Flat checkpoint container: JSON header + little-endian raw payloads.

Layout: 4-byte magic, uint64-le header length, UTF-8 canonical JSON header,
then each tensor's bytes in header order.  Canonical JSON (sorted keys, no
whitespace) makes identical states serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .optim import ParamRegistry

MAGIC = b"HBC1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, registry: ParamRegistry, meta: dict | None = None):
    names = sorted(registry.names())
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32" if registry[names[0]].dtype == np.float32 else "float64",
        "names": names,
        "shapes": {n: list(registry[n].shape) for n in names},
        "frozen": {n: registry.is_frozen(n) for n in names},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        le = _DTYPES[header["dtype"]]
        for n in names:
            f.write(registry[n].data.astype(le).tobytes(order="C"))


def load_checkpoint(path):
    """Returns (registry, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {header['format_version']}")
        le = _DTYPES[header["dtype"]]
        registry = ParamRegistry()
        for n in header["names"]:
            shape = tuple(header["shapes"][n])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(f.read(count * np.dtype(le).itemsize), dtype=le)
            data = raw.reshape(shape).astype(header["dtype"]).copy()
            registry.add(n, data, frozen=header["frozen"][n])
    return registry, header["meta"]
