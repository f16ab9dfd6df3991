"""Binary checkpoint format.

Layout: magic ``b"HLNCKPT"``, uint32 version, uint32 record count, then per
record: uint32 name length, UTF-8 name, uint32 rank, rank x uint64 dims,
little-endian float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"HLNCKPT"
VERSION = 1


def save_records(path, records: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        records = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise struct.error("name")
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(buf):
                raise struct.error("payload")
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            records[name] = arr.reshape(dims)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return records


def save_model(path, model, extra: dict[str, np.ndarray] | None = None) -> None:
    records = dict(model.state())
    if extra:
        records.update(extra)
    save_records(path, records)


def load_model_state(model, records: dict[str, np.ndarray]) -> None:
    """Copy records into ``model``'s parameters, checking names and shapes."""
    for name, p in model.named_parameters():
        if name not in records:
            raise CheckpointError(f"checkpoint v{VERSION}: missing parameter {name!r}")
        arr = records[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint v{VERSION}: parameter {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data[...] = arr
