"""Stored-procedure execution and the two commit protocols.

Partitioned phase: one worker owns each partition, so commit needs no locks
and no read validation; the engine still assigns a TID and tags the records.
Single-master phase: classic optimistic commit -- lock the write set in a
global order, validate the read set, assign a TID, install and unlock.

TID assignment (both paths): the smallest identifier in the current epoch
that exceeds the worker's previous TID and the TID of every record observed
or overwritten by the transaction. Conflicting commits therefore carry TIDs
in a serial-equivalent order, which is what makes value replication safe to
apply in any order on replicas.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import Callable

from .replication import OpDescriptor
from .storage import Partition, Record, key_partition
from .tid import LOCK_BIT, MAX_SEQ, TID_MASK, meta_tid, tid_epoch, tid_pack, tid_seq

PHASE_PARTITIONED = "partitioned"
PHASE_SINGLE_MASTER = "single_master"

ISO_SERIALIZABLE = "serializable"
ISO_READ_COMMITTED = "read_committed"

COMMITTED = "committed"
ABORTED_APPLICATION = "aborted_application"
ABORTED_VALIDATION = "aborted_validation"
DEFERRED = "deferred"


class ApplicationAbort(Exception):
    """Raised by a stored procedure to abort with no state change."""


class CrossPartitionError(RuntimeError):
    """A partitioned-phase transaction touched a foreign partition."""


@dataclass
class WriteIntent:
    table_id: int
    key: bytes
    value: bytes
    # Optional operation payload for hybrid replication: a chain of field
    # deltas whose in-order application to the pre-image equals `value`.
    # Each descriptor travels as its own wire message.
    ops: tuple[OpDescriptor, ...] | None = None


@dataclass
class TxnContext:
    phase: str
    home_partition: int
    epoch: int
    isolation: str = ISO_SERIALIZABLE
    reads: list[tuple[int, bytes, int, int]] = dc_field(default_factory=list)  # (table, key, observed word, pid)
    writes: dict[tuple[int, bytes], WriteIntent] = dc_field(default_factory=dict)
    outcome: str | None = None
    tid: int = 0

    def partitions(self) -> set[int]:
        parts = {pid for *_x, pid in self.reads}
        parts.update(key_partition(k) for _t, k in self.writes)
        return parts


@dataclass
class WorkerState:
    worker_id: int
    current_epoch: int = 1
    last_tid: int = 0
    committed: dict[str, int] = dc_field(default_factory=lambda: {PHASE_PARTITIONED: 0, PHASE_SINGLE_MASTER: 0})
    aborted_validation: int = 0
    aborted_application: int = 0


class TxnApi:
    """What a stored procedure sees: reads through the record protocol with
    observed TIDs recorded, writes buffered locally until commit."""

    def __init__(self, ctx: TxnContext, resolver: Callable[[int], Partition]):
        self.ctx = ctx
        self.resolver = resolver

    def _partition(self, key: bytes) -> tuple[int, Partition]:
        pid = key_partition(key)
        if self.ctx.phase == PHASE_PARTITIONED and pid != self.ctx.home_partition:
            raise CrossPartitionError(f"partition {pid} from home {self.ctx.home_partition}")
        return pid, self.resolver(pid)

    def read(self, table_id: int, key: bytes) -> bytes | None:
        w = self.ctx.writes.get((table_id, key))
        if w is not None:  # read-your-writes
            return w.value
        pid, part = self._partition(key)
        got = part.read(table_id, key)
        if got is None:
            return None
        value, word = got
        self.ctx.reads.append((table_id, key, word, pid))
        return value

    def write(self, table_id: int, key: bytes, value: bytes,
              ops: tuple[OpDescriptor, ...] | None = None) -> None:
        self._partition(key)  # phase guard
        self.ctx.writes[(table_id, key)] = WriteIntent(table_id, key, value, ops)

    def abort(self, reason: str = "") -> None:
        raise ApplicationAbort(reason)


ProcedureFn = Callable[[TxnApi, dict], None]

_REGISTRY: dict[str, ProcedureFn] = {}


def register_procedure(name: str, fn: ProcedureFn) -> None:
    _REGISTRY[name] = fn


def procedure(name: str) -> ProcedureFn:
    return _REGISTRY[name]


def execute(name: str, args: dict, ctx: TxnContext, resolver: Callable[[int], Partition]) -> bool:
    """Run a registered procedure against the context. Returns False (and
    marks the outcome) on an application abort; the database is untouched
    either way since writes are only buffered."""
    api = TxnApi(ctx, resolver)
    try:
        _REGISTRY[name](api, args)
        return True
    except ApplicationAbort:
        ctx.outcome = ABORTED_APPLICATION
        ctx.writes.clear()
        return False


def generate_tid(ctx: TxnContext, worker: WorkerState, record_words: list[int]) -> int:
    """Minimal TID in the current epoch above the worker's last TID and every
    record TID in the read/write set."""
    epoch = worker.current_epoch
    seq = 0
    if tid_epoch(worker.last_tid) == epoch:
        seq = tid_seq(worker.last_tid)
    for _t, _k, word, _p in ctx.reads:
        t = word & TID_MASK
        if tid_epoch(t) == epoch:
            seq = max(seq, tid_seq(t))
    for word in record_words:
        t = word & TID_MASK
        if tid_epoch(t) == epoch:
            seq = max(seq, tid_seq(t))
    if seq >= MAX_SEQ:
        raise RuntimeError(f"TID sequence overflow in epoch {epoch}")
    tid = tid_pack(epoch, seq + 1)
    worker.last_tid = tid
    return tid


def validate_read_set(ctx: TxnContext, resolver: Callable[[int], Partition]) -> tuple[int, bytes] | None:
    """Return the first conflicting (table, key), or None if the read set is
    intact: every observed TID unchanged and no record locked by another
    worker (a lock we hold ourselves on a read-write key is fine)."""
    for table_id, key, observed, pid in ctx.reads:
        rec = resolver(pid).tables.get(table_id, {}).get(key)
        if rec is None:
            return table_id, key
        word = rec.word
        if (table_id, key) in ctx.writes:
            if (word & TID_MASK) != (observed & TID_MASK):
                return table_id, key
        elif word != observed:  # TID changed, or locked by someone else
            return table_id, key
    return None


def commit_partitioned(ctx: TxnContext, worker: WorkerState, node) -> str:
    """No locks, no validation: the phase contract guarantees exclusivity.
    Writes are applied in sorted key order and streamed to replicas in commit
    order; the client-visible result is withheld until the next fence."""
    assert ctx.phase == PHASE_PARTITIONED
    part = node.partition(ctx.home_partition)
    intents = [ctx.writes[k] for k in sorted(ctx.writes)]
    prior = [part.get_tid(w.table_id, w.key) for w in intents]
    tid = generate_tid(ctx, worker, prior)
    for w in intents:
        part.write(w.table_id, w.key, w.value, tid, ctx.epoch)
        node.emit_write(ctx.home_partition, w, tid, PHASE_PARTITIONED, worker.worker_id)
    ctx.tid = tid
    ctx.outcome = COMMITTED
    worker.committed[PHASE_PARTITIONED] += 1
    return COMMITTED


def commit_single_master(
    ctx: TxnContext,
    worker: WorkerState,
    node,
    lock_trace: list[tuple[int, bytes]] | None = None,
) -> str:
    """Optimistic commit on the master node: lock the write set in (table,
    key) order, validate reads, assign the TID, install + unlock, stream
    full-record value messages."""
    assert ctx.phase == PHASE_SINGLE_MASTER
    order = sorted(ctx.writes)
    locked: list[tuple[Partition, Record]] = []
    prior: list[int] = []
    try:
        for tk in order:
            table_id, key = tk
            part = node.partition(key_partition(key))
            rec = part.lock(table_id, key, create=True)
            if lock_trace is not None:
                lock_trace.append(tk)
            locked.append((part, rec))
            prior.append(rec.word & TID_MASK)
        if ctx.isolation == ISO_SERIALIZABLE:
            conflict = validate_read_set(ctx, node.partition)
            if conflict is not None:
                ctx.outcome = ABORTED_VALIDATION
                worker.aborted_validation += 1
                for part, rec in locked:
                    part.unlock(rec)
                return ABORTED_VALIDATION
        tid = generate_tid(ctx, worker, prior)
        for tk, (part, rec) in zip(order, locked):
            w = ctx.writes[tk]
            part.write_locked(w.table_id, w.key, rec, w.value, tid, ctx.epoch)
            node.emit_write(part.id, w, tid, PHASE_SINGLE_MASTER, worker.worker_id)
        locked = []
        ctx.tid = tid
        ctx.outcome = COMMITTED
        worker.committed[PHASE_SINGLE_MASTER] += 1
        return COMMITTED
    finally:
        for part, rec in locked:  # only on abort/exception paths
            if rec.word & LOCK_BIT:
                part.unlock(rec)


def read_only_read_committed(node, table_id: int, key: bytes) -> tuple[bytes, int] | None:
    """Read-committed point read on any node during any phase; may observe the
    uncommitted epoch (callers account these separately in metrics)."""
    got = node.partition(key_partition(key)).read(table_id, key)
    if got is not None:
        node.rc_uncommitted_reads += 1
    return got


def spin_until(predicate: Callable[[], bool], timeout_s: float = 5.0) -> bool:
    deadline = time.monotonic() + timeout_s
    while not predicate():
        if time.monotonic() > deadline:
            return False
        time.sleep(0)
    return True
