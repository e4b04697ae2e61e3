"""Partitioned in-memory tables of versioned records.

Each record carries a single meta word (lock flag + TID of the last writer)
and two value slots: the current value and the stable value from the last
committed epoch. The stable slot is snapshotted lazily on the first write of
each epoch, so a fence costs time proportional to the epoch's dirty set, not
to the table size.

Concurrency contract: a partition is mutated by exactly one worker in the
partitioned phase; in the single-master phase and on replicas, writers hold
the record lock flag for the duration of the value+meta update. Readers never
take locks; `read` re-checks the meta word around the value copy and retries
while a writer holds the record.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import time
from typing import Callable, Iterator

from .tid import LOCK_BIT, TID_MASK, TID_NEVER, meta_tid

# CPython attribute loads/stores are atomic under the GIL, so the meta word is
# readable without a lock; lock-flag transitions are read-modify-write and go
# through one process-wide mutex (contention is a few workers at desk scale).
_CAS = threading.Lock()

APPLIED = "applied"
IGNORED = "ignored"
INSERTED = "inserted"

_DIGEST_HDR = struct.Struct("<IHQ")


def key_partition(key: bytes) -> int:
    """Partition of a key. All key layouts start with a big-endian u16 partition id."""
    return (key[0] << 8) | key[1]


def _digest_term(table_id: int, key: bytes, value: bytes, tid: int) -> int:
    h = hashlib.blake2b(
        _DIGEST_HDR.pack(table_id, len(key), tid) + key + value, digest_size=8
    )
    return int.from_bytes(h.digest(), "little")


class Record:
    __slots__ = ("value", "word", "stable_value", "stable_tid", "dirty_epoch", "term")

    def __init__(self, value: bytes, tid: int):
        self.value = value
        self.word = tid  # unlocked
        self.stable_value = value
        self.stable_tid = tid
        self.dirty_epoch = 0  # 0 = clean; real epochs start at 1
        self.term = 0  # this record's contribution to the partition digest


class Partition:
    """One partition: {table_id: {key: Record}} plus epoch bookkeeping."""

    def __init__(self, partition_id: int):
        self.id = partition_id
        self.tables: dict[int, dict[bytes, Record]] = {}
        self.dirty: list[tuple[int, bytes]] = []  # records touched this epoch
        self.digest = 0  # XOR of per-record terms; order-independent

    def table(self, table_id: int) -> dict[bytes, Record]:
        t = self.tables.get(table_id)
        if t is None:
            t = self.tables[table_id] = {}
        return t

    # -- read protocol ----------------------------------------------------

    def read(self, table_id: int, key: bytes) -> tuple[bytes, int] | None:
        """Atomically consistent (value, tid) snapshot, or None if absent."""
        rec = self.tables.get(table_id, {}).get(key)
        if rec is None:
            return None
        spins = 0
        while True:
            w = rec.word
            if not (w & LOCK_BIT):
                v = rec.value
                if rec.word == w:
                    # A record holding the never-written TID is a placeholder
                    # from an aborted insert; reads treat it as absent.
                    return None if w == TID_NEVER else (v, w)
            spins += 1
            if spins & 0x3F == 0:
                time.sleep(0)  # let the writer run

    def get_tid(self, table_id: int, key: bytes) -> int:
        rec = self.tables.get(table_id, {}).get(key)
        return meta_tid(rec.word) if rec is not None else TID_NEVER

    # -- write paths -------------------------------------------------------

    def _track(self, table_id: int, key: bytes, rec: Record, epoch: int) -> None:
        # Copy-on-first-write-per-epoch: stash the last committed version the
        # first time a record is touched in an epoch.
        if rec.dirty_epoch != epoch:
            rec.stable_value = rec.value
            rec.stable_tid = meta_tid(rec.word)
            rec.dirty_epoch = epoch
            self.dirty.append((table_id, key))

    def _install(self, table_id: int, key: bytes, rec: Record, value: bytes, tid: int) -> None:
        self.digest ^= rec.term
        rec.term = _digest_term(table_id, key, value, tid)
        self.digest ^= rec.term
        rec.value = value
        rec.word = tid  # publishes and releases the lock flag in one store

    def write(self, table_id: int, key: bytes, value: bytes, tid: int, epoch: int) -> None:
        """Unconditional tagged write. Partitioned-phase commit path: the
        caller is the partition's only writer, so no locking is needed."""
        t = self.table(table_id)
        rec = t.get(key)
        if rec is None:
            rec = Record(b"", TID_NEVER)
            rec.stable_tid = TID_NEVER
            t[key] = rec
        self._track(table_id, key, rec, epoch)
        self._install(table_id, key, rec, value, tid)

    def load(self, table_id: int, key: bytes, value: bytes, tid: int) -> None:
        """Bulk-load one clean record (stable == current, nothing dirtied).
        For initial data population and recovery images only."""
        rec = Record(value, tid)
        rec.term = _digest_term(table_id, key, value, tid)
        old = self.table(table_id).get(key)
        if old is not None:
            self.digest ^= old.term
        self.digest ^= rec.term
        self.table(table_id)[key] = rec

    def lock(self, table_id: int, key: bytes, create: bool = False) -> Record | None:
        """Acquire the record's lock flag, spinning until free. Returns the
        locked record, or None if absent and create is False."""
        t = self.table(table_id)
        while True:
            with _CAS:
                rec = t.get(key)
                if rec is None:
                    if not create:
                        return None
                    rec = Record(b"", TID_NEVER)
                    rec.stable_tid = TID_NEVER
                    t[key] = rec
                if not (rec.word & LOCK_BIT):
                    rec.word |= LOCK_BIT
                    return rec
            time.sleep(0)

    def try_lock(self, table_id: int, key: bytes) -> Record | None:
        """Single lock attempt (NO_WAIT style); None means held or absent."""
        rec = self.tables.get(table_id, {}).get(key)
        if rec is None:
            return None
        with _CAS:
            if rec.word & LOCK_BIT:
                return None
            rec.word |= LOCK_BIT
            return rec

    def unlock(self, rec: Record) -> None:
        rec.word &= TID_MASK

    def write_locked(self, table_id: int, key: bytes, rec: Record, value: bytes, tid: int, epoch: int) -> None:
        """Install value+tid on a record whose lock this caller holds; the
        meta store clears the lock flag."""
        self._track(table_id, key, rec, epoch)
        self._install(table_id, key, rec, value, tid)

    def apply_with(
        self,
        table_id: int,
        key: bytes,
        tid: int,
        epoch: int,
        merge: Callable[[bytes | None], bytes],
    ) -> tuple[str, bytes | None]:
        """Thomas-write-rule apply: install merge(old) only if `tid` exceeds
        the record's current TID (absent keys count as never-written).
        Returns (status, post_image). Safe under concurrent appliers."""
        rec = self.lock(table_id, key, create=True)
        assert rec is not None
        try:
            cur = meta_tid(rec.word)
            if tid <= cur:
                return IGNORED, None
            fresh = cur == TID_NEVER and rec.value == b""
            value = merge(None if fresh else rec.value)
            self.write_locked(table_id, key, rec, value, tid, epoch)
            return (INSERTED if fresh else APPLIED), value
        finally:
            if rec.word & LOCK_BIT:  # not released by write_locked (ignored path)
                self.unlock(rec)

    def apply_thomas(self, table_id: int, key: bytes, value: bytes, tid: int, epoch: int) -> str:
        status, _ = self.apply_with(table_id, key, tid, epoch, lambda _old: value)
        return status

    def apply_operation(
        self,
        table_id: int,
        key: bytes,
        tid: int,
        epoch: int,
        transform: Callable[[bytes | None], bytes],
    ) -> bytes:
        """Unconditional in-order apply for operation replication: transform
        the pre-image and stamp the message TID. FIFO delivery per source
        worker is the caller's contract."""
        rec = self.lock(table_id, key, create=True)
        assert rec is not None
        value = transform(rec.value if meta_tid(rec.word) != TID_NEVER or rec.value else None)
        self.write_locked(table_id, key, rec, value, tid, epoch)
        return value

    # -- epoch boundary ----------------------------------------------------

    def epoch_promote(self, epoch: int) -> int:
        """At a fence: current becomes the stable version for every record
        dirtied this epoch. No concurrent writers allowed."""
        n = 0
        for table_id, key in self.dirty:
            rec = self.tables[table_id][key]
            if rec.dirty_epoch != epoch:
                continue
            assert not (rec.word & LOCK_BIT), "lock flag must not survive a fence"
            rec.stable_value = rec.value
            rec.stable_tid = rec.word
            rec.dirty_epoch = 0
            n += 1
        self.dirty.clear()
        return n

    def epoch_revert(self) -> int:
        """Recovery: discard the uncommitted epoch's writes. Records inserted
        this epoch (stable TID = never-written) are deleted outright."""
        n = 0
        for table_id, key in self.dirty:
            t = self.tables[table_id]
            rec = t.get(key)
            if rec is None or rec.dirty_epoch == 0:
                continue
            self.digest ^= rec.term
            if rec.stable_tid == TID_NEVER:
                del t[key]
            else:
                rec.value = rec.stable_value
                rec.word = rec.stable_tid
                rec.term = _digest_term(table_id, key, rec.value, rec.stable_tid)
                self.digest ^= rec.term
                rec.dirty_epoch = 0
            n += 1
        self.dirty.clear()
        return n

    # -- scans ---------------------------------------------------------------

    def items(self, table_id: int | None = None) -> Iterator[tuple[int, bytes, bytes, int]]:
        """(table_id, key, value, tid) for every record, via the read protocol
        (safe against concurrent writers; per-record consistent, not a
        partition-wide snapshot)."""
        tables = self.tables.items() if table_id is None else [(table_id, self.table(table_id))]
        for tid_, table in tables:
            for key in list(table.keys()):
                got = self.read(tid_, key)
                if got is not None:
                    yield tid_, key, got[0], meta_tid(got[1])

    def count(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def state_dict(self) -> dict[tuple[int, bytes], tuple[bytes, int]]:
        return {(t, k): (v, tid) for t, k, v, tid in self.items()}


class SecondaryIndex:
    """Exact-match secondary hash index stub: maps an extracted field value to
    primary keys. Maintained manually by loaders; not updated by writes."""

    def __init__(self, extract: Callable[[bytes], bytes]):
        self.extract = extract
        self.map: dict[bytes, list[bytes]] = {}

    def insert(self, key: bytes, value: bytes) -> None:
        self.map.setdefault(self.extract(value), []).append(key)

    def lookup(self, field_value: bytes) -> list[bytes]:
        return self.map.get(field_value, [])
