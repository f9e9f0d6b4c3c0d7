"""Self-describing binary checkpoints.

Layout: magic ``MAFTCKPT``, little-endian u32 format version, a
length-prefixed UTF-8 JSON metadata block (config text, counters, RNG
state, tensor order), then length-prefixed named float64 tensors. Exact
byte round-trips make resumed training bit-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MAFTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt file or version/config mismatch."""


def _write_block(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_block(fh, what: str) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} length"))
    return _read_exact(fh, n, what)


def save(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_block(fh, json.dumps(meta, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            _write_block(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: format version {version} unsupported (expected {VERSION})"
            )
        meta = json.loads(_read_block(fh, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_block(fh, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "tensor shape"))
            n_bytes = 8 * int(np.prod(shape)) if ndim else 8
            raw = _read_exact(fh, n_bytes, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors, meta
