"""Bit-exact binary container for labeled feature maps.

File layout (all little-endian):
  header:  magic "FGEN" | version u32 | record_count u64 | dims c,h,w (3x u32)
  record:  label u8 | source u8 | parent_id length u16 | parent_id bytes
           | payload c*h*w float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .data import Label

MAGIC = b"FGEN"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")
_REC_PREFIX = struct.Struct("<BBH")


class StoreError(Exception):
    """Base error for malformed feature stores."""


class BadMagicError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class Source(IntEnum):
    REAL = 0
    SYNTHETIC = 1


@dataclass
class FeatureMap:
    data: np.ndarray  # float32, (c, h, w)
    label: Label
    source: Source
    parent_id: str

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("feature data must be (c, h, w)")
        if not np.isfinite(self.data).all():
            raise ValueError("feature data must be finite")


def write_store(path, records: list[FeatureMap]) -> int:
    """Write records; returns the record count. Shapes must be homogeneous."""
    path = Path(path)
    dims = records[0].data.shape if records else (0, 0, 0)
    for i, r in enumerate(records):
        if r.data.shape != dims:
            raise ValueError(f"record {i} shape {r.data.shape} != store dims {dims}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(records), *dims))
        for r in records:
            pid = r.parent_id.encode("utf-8")
            if len(pid) > 0xFFFF:
                raise ValueError("parent_id too long")
            f.write(_REC_PREFIX.pack(int(r.label), int(r.source), len(pid)))
            f.write(pid)
            f.write(r.data.astype("<f4", copy=False).tobytes())
    return len(records)


def _read_exact(f, n, what, index=None):
    buf = f.read(n)
    if len(buf) != n:
        where = f" in record {index}" if index is not None else ""
        raise TruncatedStoreError(f"truncated {what}{where}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_header(path):
    """Returns (version, record_count, dims) after validating magic/version."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TruncatedStoreError("truncated header")
    magic, version, count, c, h, w = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    return version, count, (c, h, w)


def read_store(path) -> list[FeatureMap]:
    """Exact inverse of write_store."""
    _, count, dims = read_header(path)
    payload_bytes = 4 * int(np.prod(dims)) if count else 0
    records = []
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        for i in range(count):
            label, source, pid_len = _REC_PREFIX.unpack(
                _read_exact(f, _REC_PREFIX.size, "record prefix", i))
            pid = _read_exact(f, pid_len, "parent_id", i).decode("utf-8")
            buf = _read_exact(f, payload_bytes, "payload", i)
            data = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
            records.append(FeatureMap(data=data, label=Label(label),
                                      source=Source(source), parent_id=pid))
    return records


def inspect_store(path) -> dict:
    """Header plus per-class/per-source record counts."""
    _, count, dims = read_header(path)
    records = read_store(path)
    by_label = {lbl.name: sum(1 for r in records if r.label == lbl) for lbl in Label}
    by_source = {src.name: sum(1 for r in records if r.source == src) for src in Source}
    return {"version": VERSION, "record_count": count, "dims": list(dims),
            "by_label": by_label, "by_source": by_source}
