"""File formats: TGF1 tensors, landmark CSV, JSON helpers and atomic writes.

A TGF1 file is the 4-byte magic ``TGF1``, a little-endian uint32 header
length, a UTF-8 JSON header and raw little-endian float32 data::

    {"dtype": "f32", "order": "row-major",
     "shape": [frames, channels, height, width], "coord": "xy-colrow"}
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"TGF1"


def encode_tgf(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 4:
        raise ValueError(f"TGF1 holds at most 4 dims, got {arr.ndim}")
    shape = [1] * (4 - arr.ndim) + list(arr.shape)
    header = json.dumps(
        {"dtype": "f32", "order": "row-major", "shape": shape, "coord": "xy-colrow"},
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + np.ascontiguousarray(arr).tobytes()


def decode_tgf(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TGF1 record at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not a TGF1 record (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, offset + 4)
    start = offset + 8
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    if header.get("dtype") != "f32" or header.get("order") != "row-major":
        raise ValueError(f"unsupported TGF1 header {header}")
    shape = [int(s) for s in header["shape"]]
    if len(shape) != 4:
        raise ValueError("TGF1 shape must have 4 entries")
    count = int(np.prod(shape))
    data_start = start + hlen
    end = data_start + 4 * count
    if end > len(buf):
        raise ValueError("truncated TGF1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=data_start).reshape(shape)
    return arr.astype(np.float32), end


@contextmanager
def atomic_path(path: str | os.PathLike) -> Iterator[Path]:
    """Yield ``path.partial``; rename to ``path`` only if the block succeeds."""
    path = Path(path)
    partial = path.with_name(path.name + ".partial")
    try:
        yield partial
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    os.replace(partial, path)


def write_bytes(path: str | os.PathLike, data: bytes) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)
    return Path(path)


def write_text(path: str | os.PathLike, text: str) -> Path:
    return write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj) -> Path:
    return write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_tgf(path: str | os.PathLike, array: np.ndarray) -> Path:
    return write_bytes(path, encode_tgf(array))


def load_tgf(path: str | os.PathLike) -> np.ndarray:
    arr, end = decode_tgf(Path(path).read_bytes())
    return arr


def save_landmarks(path: str | os.PathLike, landmarks: np.ndarray) -> Path:
    """Write ``(N, M, 2)`` landmark trajectories as ``frame,id,x,y`` rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "id", "x", "y"])
    for n, frame in enumerate(np.asarray(landmarks)):
        for i, (x, y) in enumerate(frame):
            writer.writerow([n, i, repr(float(x)), repr(float(y))])
    return write_text(path, buf.getvalue())


def load_landmarks(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no landmarks")
    n = max(int(r["frame"]) for r in rows) + 1
    m = max(int(r["id"]) for r in rows) + 1
    out = np.full((n, m, 2), np.nan)
    for r in rows:
        out[int(r["frame"]), int(r["id"])] = float(r["x"]), float(r["y"])
    if np.isnan(out).any():
        raise ValueError(f"{path}: incomplete landmark table")
    return out


def write_csv(path: str | os.PathLike, columns, rows) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return write_text(path, buf.getvalue())


def sha256_file(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
