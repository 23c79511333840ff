"""Binary serialization of simulator snapshots.

Format (little-endian, documented in docs/formats.md):

    magic   4 bytes  b"ODCS"
    version u32      currently 1
    interval_index u64
    n_segments u64, n_ods u64, n_packets u64
    pk_od      n_packets * i32
    pk_pos     n_packets * i32
    pk_cnt     n_packets * f64
    pk_ready   n_packets * f64
    pk_entry   n_packets * f64
    seg_counts n_segments * i64
    occ        n_segments * f64
    backlog, loaded_total, exited_total   each n_ods * f64

Floats are raw IEEE-754 doubles, so a round trip restores the state bit
for bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import SimulatorSnapshot

MAGIC = b"ODCS"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "SnapshotFormatError", "to_bytes", "from_bytes"]


class SnapshotFormatError(ValueError):
    """Blob does not carry a compatible snapshot."""


def to_bytes(snap: SimulatorSnapshot) -> bytes:
    head = struct.pack(
        "<4sIQQQQ", MAGIC, VERSION, snap.interval_index,
        snap.seg_counts.shape[0], snap.backlog.shape[0], snap.pk_od.shape[0])
    parts = [head]
    for arr, dtype in (
        (snap.pk_od, "<i4"), (snap.pk_pos, "<i4"),
        (snap.pk_cnt, "<f8"), (snap.pk_ready, "<f8"), (snap.pk_entry, "<f8"),
        (snap.seg_counts, "<i8"), (snap.occ, "<f8"),
        (snap.backlog, "<f8"), (snap.loaded_total, "<f8"),
        (snap.exited_total, "<f8"),
    ):
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> SimulatorSnapshot:
    head_size = struct.calcsize("<4sIQQQQ")
    if len(blob) < head_size:
        raise SnapshotFormatError("blob too short for header")
    magic, version, interval, n_seg, n_od, n_pk = struct.unpack_from(
        "<4sIQQQQ", blob)
    if magic != MAGIC:
        raise SnapshotFormatError("bad magic; not a snapshot blob")
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    off = head_size

    def take(count, dtype):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(blob):
            raise SnapshotFormatError("blob truncated")
        out = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return out

    pk_od = take(n_pk, "<i4")
    pk_pos = take(n_pk, "<i4")
    pk_cnt = take(n_pk, "<f8")
    pk_ready = take(n_pk, "<f8")
    pk_entry = take(n_pk, "<f8")
    seg_counts = take(n_seg, "<i8")
    occ = take(n_seg, "<f8")
    backlog = take(n_od, "<f8")
    loaded_total = take(n_od, "<f8")
    exited_total = take(n_od, "<f8")
    if off != len(blob):
        raise SnapshotFormatError("trailing bytes after snapshot payload")
    return SimulatorSnapshot(
        interval_index=int(interval),
        pk_od=pk_od.astype(np.int32), pk_pos=pk_pos.astype(np.int32),
        pk_cnt=pk_cnt, pk_ready=pk_ready, pk_entry=pk_entry,
        seg_counts=seg_counts, occ=occ, backlog=backlog,
        loaded_total=loaded_total, exited_total=exited_total)
