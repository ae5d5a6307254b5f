"""Binary tensor container shared by checkpoints and embedding files.

Layout (all integers little-endian)::

    magic   4 bytes  b"CSTC"
    version u16      1
    count   u32      number of tensors
    then, per tensor:
      name_len u16, name (utf-8)
      dtype    u8    1 = float32 little-endian
      rank     u8
      shape    rank x u64
      payload  prod(shape) x float32, row-major
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContentSepError

MAGIC = b"CSTC"
VERSION = 1
DTYPE_F32 = 1


class ContainerError(ContentSepError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value, dtype="<f4", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read_header(fh, path):
    if fh.read(4) != MAGIC:
        raise ContainerError(f"{path}: not a tensor container")
    version, count = struct.unpack("<HI", fh.read(6))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    return count


def _iter_entries(fh, path, count, read_payload):
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        dtype, rank = struct.unpack("<BB", fh.read(2))
        if dtype != DTYPE_F32:
            raise ContainerError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if read_payload:
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ContainerError(f"{path}: truncated payload for {name!r}")
            yield name, shape, np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        else:
            fh.seek(nbytes, 1)
            yield name, shape, None


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        count = _read_header(fh, path)
        return {name: arr for name, _, arr in _iter_entries(fh, path, count, True)}


def list_tensors(path) -> dict[str, tuple]:
    """Names and shapes without reading payloads."""
    with open(path, "rb") as fh:
        count = _read_header(fh, path)
        return {name: shape for name, shape, _ in _iter_entries(fh, path, count, False)}


def save_checkpoint(path, module, meta: Mapping | None = None) -> None:
    """Write a torch module's state to the container, config to a JSON sidecar."""
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_tensors(path, state)
    if meta is not None:
        Path(path).with_suffix(".json").write_text(json.dumps(dict(meta), indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    meta_path = Path(path).with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return load_tensors(path), meta


def state_hash(module, prefixes=None) -> str:
    """SHA-256 over the raw bytes of (selected) parameters and buffers."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        if prefixes is not None and not any(name.startswith(p) for p in prefixes):
            continue
        h.update(name.encode())
        h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()
