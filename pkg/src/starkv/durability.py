"""Per-worker write-ahead logs, fuzzy checkpoints and disk recovery.

Every durable write is a full record image (operation replication messages
are transformed before logging), so recovery can replay logs in any order --
including in parallel -- under the Thomas write rule.

On-disk log entry:    u32 crc | u32 table_id | u16 key_len | key |
                      u32 value_len | value | u64 tid
Epoch-commit record:  u32 crc | u32 0xFFFFFFFF | u64 epoch
Checkpoint file:      u64 magic | u64 start_epoch | entries (log format) |
                      u64 trailer_magic | u64 entry_count
The crc covers everything after itself in the entry.
"""

from __future__ import annotations

import os
import re
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from .storage import Partition, key_partition
from .tid import tid_epoch

EPOCH_SENTINEL = 0xFFFFFFFF
CKPT_MAGIC = 0x5354414B_43503031  # "STAK" "CP01"
CKPT_TRAILER = 0x5354414B_43504544

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_HDR = struct.Struct("<IIH")  # crc, table_id, key_len

DEFAULT_SEGMENT_BYTES = 64 * 1024 * 1024


@dataclass(frozen=True)
class LogEntry:
    table_id: int
    key: bytes
    value: bytes
    tid: int


@dataclass(frozen=True)
class EpochMark:
    epoch: int


def _encode_entry(e: LogEntry) -> bytes:
    body = (
        _U32.pack(e.table_id) + struct.pack("<H", len(e.key)) + e.key
        + _U32.pack(len(e.value)) + e.value + _U64.pack(e.tid)
    )
    return _U32.pack(zlib.crc32(body)) + body


def _encode_mark(epoch: int) -> bytes:
    body = _U32.pack(EPOCH_SENTINEL) + _U64.pack(epoch)
    return _U32.pack(zlib.crc32(body)) + body


def entry_size(e: LogEntry) -> int:
    return 4 + 4 + 2 + len(e.key) + 4 + len(e.value) + 8


class LogWriter:
    """Append-only per-worker log with in-memory buffering and 64 MB segment
    rotation. One owner thread; flush() is what makes entries durable."""

    def __init__(self, directory: str, name: str, segment_bytes: int = DEFAULT_SEGMENT_BYTES):
        self.directory = directory
        self.name = name
        self.segment_bytes = segment_bytes
        self.segment = 0
        self.buffer: list[bytes] = []
        self.buffered_bytes = 0
        os.makedirs(directory, exist_ok=True)
        self._file = open(self._segment_path(0), "ab")

    def _segment_path(self, idx: int) -> str:
        return os.path.join(self.directory, f"{self.name}.{idx:04d}.log")

    def append(self, entry: LogEntry) -> None:
        data = _encode_entry(entry)
        self.buffer.append(data)
        self.buffered_bytes += len(data)

    def append_many(self, entries: Iterable[LogEntry]) -> None:
        for e in entries:
            self.append(e)

    def mark_epoch(self, epoch: int) -> None:
        self.buffer.append(_encode_mark(epoch))
        self.flush()

    def flush(self) -> None:
        if self.buffer:
            self._file.write(b"".join(self.buffer))
            self.buffer.clear()
            self.buffered_bytes = 0
        self._file.flush()
        if self._file.tell() >= self.segment_bytes:
            self._file.close()
            self.segment += 1
            self._file = open(self._segment_path(self.segment), "ab")

    def close(self) -> None:
        self.flush()
        self._file.close()


def read_log_file(path: str) -> Iterator[LogEntry | EpochMark]:
    """Yield entries until EOF or the first corrupt entry (entries past a bad
    checksum belong to an unflushed epoch and are discarded)."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0
    n = len(data)
    while off + 8 <= n:
        (crc,) = _U32.unpack_from(data, off)
        (table_id,) = _U32.unpack_from(data, off + 4)
        if table_id == EPOCH_SENTINEL:
            end = off + 4 + 4 + 8
            if end > n or zlib.crc32(data[off + 4 : end]) != crc:
                return
            (epoch,) = _U64.unpack_from(data, off + 8)
            yield EpochMark(epoch)
            off = end
            continue
        if off + _HDR.size > n:
            return
        _, _, key_len = _HDR.unpack_from(data, off)
        pos = off + _HDR.size
        if pos + key_len + 4 > n:
            return
        key = data[pos : pos + key_len]
        pos += key_len
        (vlen,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + vlen + 8 > n:
            return
        value = data[pos : pos + vlen]
        (tid,) = _U64.unpack_from(data, pos + vlen)
        end = pos + vlen + 8
        if zlib.crc32(data[off + 4 : end]) != crc:
            return
        yield LogEntry(table_id, key, value, tid)
        off = end


def log_segments(directory: str, name: str) -> list[str]:
    if not os.path.isdir(directory):
        return []
    pat = re.compile(re.escape(name) + r"\.(\d+)\.log$")
    found = []
    for fn in os.listdir(directory):
        m = pat.match(fn)
        if m:
            found.append((int(m.group(1)), os.path.join(directory, fn)))
    return [p for _i, p in sorted(found)]


def write_checkpoint(path: str, partitions: Iterable[Partition], start_epoch: int) -> int:
    """Fuzzy checkpoint: scan without blocking writers. Individual records are
    consistent (the scan uses the read protocol) but the set as a whole is
    not a snapshot; recovery fixes it up by replaying logs from start_epoch.
    The trailer marker is written last; without it the file is ignored."""
    count = 0
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_U64.pack(CKPT_MAGIC) + _U64.pack(start_epoch))
        for part in partitions:
            for table_id, key, value, tid in part.items():
                f.write(_encode_entry(LogEntry(table_id, key, value, tid)))
                count += 1
        f.write(_U64.pack(CKPT_TRAILER) + _U64.pack(count))
    os.replace(tmp, path)
    return count


def read_checkpoint(path: str) -> tuple[int, list[LogEntry]] | None:
    """(start_epoch, entries), or None if the file is absent or incomplete."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError:
        return None
    if len(data) < 32 or _U64.unpack_from(data, 0)[0] != CKPT_MAGIC:
        return None
    if _U64.unpack_from(data, len(data) - 16)[0] != CKPT_TRAILER:
        return None
    (expected,) = _U64.unpack_from(data, len(data) - 8)
    (start_epoch,) = _U64.unpack_from(data, 8)
    entries: list[LogEntry] = []
    off = 16
    end = len(data) - 16
    while off < end:
        (crc,) = _U32.unpack_from(data, off)
        _, table_id, key_len = _HDR.unpack_from(data, off)
        pos = off + _HDR.size
        key = data[pos : pos + key_len]
        pos += key_len
        (vlen,) = _U32.unpack_from(data, pos)
        pos += 4
        value = data[pos : pos + vlen]
        (tid,) = _U64.unpack_from(data, pos + vlen)
        stop = pos + vlen + 8
        if stop > end or zlib.crc32(data[off + 4 : stop]) != crc:
            return None
        entries.append(LogEntry(table_id, key, value, tid))
        off = stop
    if len(entries) != expected:
        return None
    return start_epoch, entries


class NodeDurability:
    """All durable state of one node: per-worker logs plus checkpoints."""

    def __init__(self, directory: str, node_id: int, enabled: bool = True,
                 segment_bytes: int = DEFAULT_SEGMENT_BYTES):
        self.directory = os.path.join(directory, f"node{node_id}")
        self.node_id = node_id
        self.enabled = enabled
        self.segment_bytes = segment_bytes
        self.writers: dict[int, LogWriter] = {}
        self.checkpoints = 0

    def writer(self, worker_id: int) -> LogWriter:
        w = self.writers.get(worker_id)
        if w is None:
            w = LogWriter(self.directory, f"worker{worker_id}", self.segment_bytes)
            self.writers[worker_id] = w
        return w

    def log_write(self, worker_id: int, table_id: int, key: bytes, value: bytes, tid: int) -> None:
        if self.enabled:
            self.writer(worker_id).append(LogEntry(table_id, key, value, tid))

    def flush_all(self) -> None:
        for w in self.writers.values():
            w.flush()

    def mark_epoch(self, epoch: int) -> None:
        # Written on fence release: the epoch is only then globally committed.
        for w in self.writers.values():
            w.mark_epoch(epoch)

    def checkpoint_path(self, idx: int) -> str:
        return os.path.join(self.directory, f"checkpoint.{idx:04d}.ckpt")

    def run_checkpoint(self, partitions: Iterable[Partition], epoch: int) -> str:
        path = self.checkpoint_path(self.checkpoints)
        write_checkpoint(path, partitions, epoch)
        self.checkpoints += 1
        return path

    def latest_checkpoint(self) -> tuple[int, list[LogEntry]] | None:
        if not os.path.isdir(self.directory):
            return None
        names = sorted(fn for fn in os.listdir(self.directory) if fn.endswith(".ckpt"))
        for fn in reversed(names):
            got = read_checkpoint(os.path.join(self.directory, fn))
            if got is not None:
                return got
        return None

    def worker_logs(self) -> list[list[str]]:
        if not os.path.isdir(self.directory):
            return []
        names = sorted({fn.split(".")[0] for fn in os.listdir(self.directory) if fn.endswith(".log")})
        return [log_segments(self.directory, name) for name in names]

    def last_marked_epoch(self) -> int:
        """Highest epoch that every worker log has flush-marked (0 if none)."""
        per_worker = []
        for segments in self.worker_logs():
            marked = 0
            for path in segments:
                for item in read_log_file(path):
                    if isinstance(item, EpochMark):
                        marked = max(marked, item.epoch)
            per_worker.append(marked)
        return min(per_worker) if per_worker else 0

    def close(self) -> None:
        for w in self.writers.values():
            w.close()
        self.writers.clear()


def recover_from_disk(
    durability: NodeDurability,
    resolver: Callable[[int], Partition],
    target_epoch: int | None = None,
    entry_order: Callable[[list[LogEntry]], list[LogEntry]] | None = None,
) -> tuple[int, int]:
    """Rebuild partitions from the latest complete checkpoint plus logs.

    Replays every log entry with checkpoint_epoch <= epoch(tid) <= target
    through the Thomas rule, so any replay order gives the same state. The
    target defaults to this node's last fully flush-marked epoch; a cluster
    orchestrator may pass the max marker across nodes instead. Returns
    (recovered_epoch, entries_applied).
    """
    ckpt = durability.latest_checkpoint()
    start_epoch = 1
    applied = 0
    if target_epoch is None:
        target_epoch = durability.last_marked_epoch()
    touched: dict[int, Partition] = {}

    def apply(e: LogEntry) -> None:
        nonlocal applied
        part = resolver(key_partition(e.key))
        touched[part.id] = part
        part.apply_thomas(e.table_id, e.key, e.value, e.tid, target_epoch or 1)
        applied += 1

    if ckpt is not None:
        start_epoch, entries = ckpt
        for e in entries:
            apply(e)
    replay: list[LogEntry] = []
    for segments in durability.worker_logs():
        for path in segments:
            for item in read_log_file(path):
                if isinstance(item, LogEntry) and start_epoch <= tid_epoch(item.tid) <= target_epoch:
                    replay.append(item)
    if entry_order is not None:
        replay = entry_order(replay)
    for e in replay:
        apply(e)
    for part in touched.values():  # recovered state is the committed state
        part.epoch_promote(target_epoch or 1)
    return target_epoch, applied
