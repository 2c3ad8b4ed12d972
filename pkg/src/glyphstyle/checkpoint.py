"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes   b"GSCK"
    version    u16       1
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (model config, vocabularies, ...)
    count      u32       number of tensor records
    record * count:
        name_len  u16
        name      UTF-8 bytes, e.g. "G.decoder.layers.0.block1.conv.weight"
        kind      u8        0 = parameter, 1 = buffer
        dtype     u8        1 = float32, 2 = float64
        ndim      u8
        dims      u32 * ndim
        data      raw little-endian values, C order

Records appear in module registration order. Values are written
bit-for-bit, so a save/load round trip is exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .nnblocks import Module

MAGIC = b"GSCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def _write_record(fh: BinaryIO, name: str, kind: int, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BBB", kind, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def save_checkpoint(path, modules: Mapping[str, Module], meta: dict) -> None:
    """Write every parameter and buffer of ``modules`` (keyed by prefix)."""
    records = []
    for prefix, mod in modules.items():
        records += [(f"{prefix}.{n}", 0, p.data) for n, p in mod.named_parameters()]
        records += [(f"{prefix}.{n}", 1, b) for n, b in mod.named_buffers()]
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for name, kind, arr in records:
            _write_record(fh, name, kind, arr)


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(path) -> tuple[dict, dict[str, tuple[int, np.ndarray]]]:
    """Return ``(meta, {name: (kind, array)})``."""
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<HI", _read(fh, 6))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        meta = json.loads(_read(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors: dict[str, tuple[int, np.ndarray]] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode("utf-8")
            kind, code, ndim = struct.unpack("<BBB", _read(fh, 3))
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(_read(fh, nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
            tensors[name] = (kind, arr)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last record")
    return meta, tensors


def load_into(modules: Mapping[str, Module], tensors: Mapping[str, tuple[int, np.ndarray]]) -> None:
    """Copy stored values into already-constructed modules; names and shapes must match."""
    expected = set()
    for prefix, mod in modules.items():
        for n, p in mod.named_parameters():
            key = f"{prefix}.{n}"
            expected.add(key)
            if key not in tensors:
                raise CheckpointError(f"missing parameter {key}")
            kind, arr = tensors[key]
            if arr.shape != p.shape:
                raise CheckpointError(f"{key}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.grad = None
        for n, b in list(mod.named_buffers()):
            key = f"{prefix}.{n}"
            expected.add(key)
            if key not in tensors:
                raise CheckpointError(f"missing buffer {key}")
            mod.set_buffer(n, tensors[key][1].copy())
    extra = set(tensors) - expected
    extra = {k for k in extra if k.split(".", 1)[0] in modules}
    if extra:
        raise CheckpointError(f"unexpected tensors: {sorted(extra)[:5]}")
