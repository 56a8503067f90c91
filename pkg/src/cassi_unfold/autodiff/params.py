"""Named parameter store and its on-disk checkpoint format.

Checkpoint layout (little-endian throughout):

    magic  "DTA1"
    repeated records, one per tensor, in lexicographic name order:
        u32   name length in bytes
        bytes UTF-8 name
        u32   rank
        u32*  dims
        f32*  row-major data

A JSON sidecar written next to the binary carries the model hyperparameters
needed to rebuild the module tree before loading tensors into it.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Iterator

import numpy as np

from .tensor import AutodiffError, DiffTensor

__all__ = ["CheckpointError", "ParamStore", "load_params", "save_params",
           "read_sidecar", "write_sidecar", "sidecar_path"]

_MAGIC = b"DTA1"


class CheckpointError(AutodiffError):
    """Malformed checkpoint file or name/shape mismatch on load."""


class ParamStore:
    """Flat name -> DiffTensor mapping for trainable parameters.

    Names are slash-separated paths ("stage0/est/fc1_w").  Insertion order
    is irrelevant; serialization always sorts.
    """

    def __init__(self):
        self._store: dict[str, DiffTensor] = {}

    def create(self, name: str, values: np.ndarray) -> DiffTensor:
        if name in self._store:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        t = DiffTensor(np.asarray(values, dtype=np.float64),
                       requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> DiffTensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return sorted(self._store)

    def items(self) -> Iterator[tuple[str, DiffTensor]]:
        return iter(sorted(self._store.items()))

    def n_scalars(self) -> int:
        return sum(t.size for t in self._store.values())

    def overwrite(self, name: str, values: np.ndarray) -> None:
        t = self._store[name]
        arr = np.asarray(values, dtype=t.values.dtype)
        if arr.shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: store has {t.shape}, "
                f"got {arr.shape}")
        t.values = arr

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self._store.items()}


def save_params(store: ParamStore, path: str) -> None:
    """Write the store to ``path`` atomically (temp file + rename)."""
    payload = bytearray(_MAGIC)
    for name, t in store.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.values, dtype="<f4")
        payload += struct.pack("<I", len(nb))
        payload += nb
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()
    _atomic_write(path, bytes(payload))


def load_params(path: str, store: ParamStore | None = None):
    """Read a checkpoint.

    With ``store`` given, every record must match an existing parameter
    (same name, same shape) and values are loaded in place; returns the
    store.  Without it, returns a plain dict name -> float32 array.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    pos = 4
    seen: dict[str, np.ndarray] = {}
    prev_name = None
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated record header")
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + nlen > len(blob):
            raise CheckpointError(f"{path}: truncated name")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if prev_name is not None and name <= prev_name:
            raise CheckpointError(
                f"{path}: records out of order ({prev_name!r} then {name!r})")
        prev_name = name
        if pos + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated rank for {name!r}")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank}")
        if pos + 4 * rank > len(blob):
            raise CheckpointError(f"{path}: truncated dims for {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=pos).reshape(dims)
        pos += nbytes
        seen[name] = arr.copy()
    if store is None:
        return seen
    missing = [n for n in seen if n not in store]
    if missing:
        raise CheckpointError(
            f"{path}: unknown parameter names {missing[:3]}")
    absent = [n for n, _ in store.items() if n not in seen]
    if absent:
        raise CheckpointError(
            f"{path}: checkpoint lacks parameters {absent[:3]}")
    for name, arr in seen.items():
        t = store[name]
        if arr.shape != t.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"{arr.shape} vs {t.shape}")
        t.values = arr.astype(t.values.dtype)
    return store


def sidecar_path(ckpt_path: str) -> str:
    return ckpt_path + ".json"


def write_sidecar(ckpt_path: str, meta: dict) -> None:
    _atomic_write(sidecar_path(ckpt_path),
                  json.dumps(meta, indent=2, sort_keys=True).encode())


def read_sidecar(ckpt_path: str) -> dict:
    p = sidecar_path(ckpt_path)
    if not os.path.exists(p):
        raise CheckpointError(f"missing sidecar {p}")
    with open(p, "rb") as fh:
        return json.loads(fh.read())


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
