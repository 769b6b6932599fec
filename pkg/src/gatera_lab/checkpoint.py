"""Named-tensor checkpoint files.

Binary layout (all integers little-endian)::

    b"GRK1"                      magic + format version
    u32  tensor count
    per tensor, in insertion order:
      u16  name length, then the UTF-8 name bytes
      u8   ndim, then ndim x u32 dims
      f64  payload, little-endian, row-major

The run configuration is echoed to ``<path>.json`` next to the binary file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"GRK1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: Optional[dict] = None
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8", order="C")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        off = 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if off + 8 * n > len(buf):
                raise CheckpointFormatError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - off} trailing bytes after {count} tensors")
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt.tensors))
    if ckpt.config is not None or ckpt.meta:
        sidecar = {"format_version": ckpt.version, "config": ckpt.config, "meta": ckpt.meta}
        config_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    tensors = decode(path.read_bytes())
    cfg, meta = None, {}
    side = config_path(path)
    if side.exists():
        doc = json.loads(side.read_text())
        cfg, meta = doc.get("config"), doc.get("meta", {})
    return Checkpoint(tensors=tensors, config=cfg, meta=meta)


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
