"""Replication messages, wire codec, strategy selection and apply paths.

Two data kinds flow between replicas: Value messages carry the replicated
fields of a full record image and may be applied in any order (Thomas write
rule); Operation messages carry a field-level delta and must be applied in
FIFO order per (source worker, destination) stream, which holds because a
partitioned-phase partition has a single writer. Control frames share the
framing and carry the coordinator protocol.

Wire frame (little-endian):
  u32 length of the remainder | u8 kind | u32 table_id | u64 tid |
  u32 source_worker | u64 seq_no | u16 key_len | key |
  Value payload:      u32 field_mask, then (u32 len + bytes) per masked field
  Operation payload:  u8 op_code, u16 field_index, u16 operand_len, operand
  Control payload:    opaque bytes (JSON-encoded coordinator messages)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .rows import decode_row, encode_row, pack_i64, unpack_i64
from .storage import Partition

KIND_VALUE = 0
KIND_OPERATION = 1
KIND_CONTROL = 2

OP_SET = 0
OP_ADD = 1
OP_CONCAT = 2

PHASE_PARTITIONED = "partitioned"
PHASE_SINGLE_MASTER = "single_master"

MODE_VALUE_ONLY = "value"
MODE_HYBRID = "hybrid"

_HEAD = struct.Struct("<BIQIQH")  # kind, table, tid, source_worker, seq_no, key_len
_LEN = struct.Struct("<I")
_OP_HEAD = struct.Struct("<BHH")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class StreamOrderError(RuntimeError):
    """An operation message skipped a sequence number: the transport broke its
    FIFO contract. Not recoverable; convergence can no longer be argued."""


@dataclass(frozen=True)
class OpDescriptor:
    op_code: int
    field: int
    operand: bytes

    def apply(self, row: list[bytes]) -> None:
        """Deterministically rewrite one field of the row in place."""
        while len(row) <= self.field:
            row.append(b"")
        old = row[self.field]
        if self.op_code == OP_SET:
            row[self.field] = self.operand
        elif self.op_code == OP_ADD:
            # Signed 64-bit add; operand is 1..8 bytes, sign-extended.
            opnd = int.from_bytes(self.operand, "little", signed=True)
            row[self.field] = pack_i64(_wrap_i64(unpack_i64(old) + opnd))
        elif self.op_code == OP_CONCAT:
            # Prepend and truncate to the pre-image length (fixed-width field).
            row[self.field] = (self.operand + old)[: len(old)]
        else:
            raise ValueError(f"unknown op_code {self.op_code}")


def _wrap_i64(v: int) -> int:
    v &= 0xFFFFFFFFFFFFFFFF
    return v - (1 << 64) if v >= (1 << 63) else v


@dataclass
class Message:
    kind: int
    table_id: int
    tid: int
    key: bytes
    source_worker: int = 0
    seq_no: int = 0
    # Value payload: mask bit i set -> fields[] contains field i (ascending).
    mask: int = 0
    fields: list[bytes] = field(default_factory=list)
    op: OpDescriptor | None = None
    control: bytes = b""
    source_node: int = -1  # transport-level, not on the wire


def choose_strategy(phase: str, mode: str, has_op: bool) -> int:
    """Value replication whenever multiple writers may touch a partition
    (single-master phase); operation replication only in the partitioned
    phase under hybrid mode, and only when the procedure supplied a delta."""
    if phase == PHASE_SINGLE_MASTER:
        return KIND_VALUE
    if mode == MODE_HYBRID and has_op:
        return KIND_OPERATION
    return KIND_VALUE


def bytes_for(msg: Message) -> int:
    """Exact encoded frame length, computed without building the frame."""
    n = 4 + _HEAD.size + len(msg.key)
    if msg.kind == KIND_VALUE:
        n += 4 + sum(4 + len(f) for f in msg.fields)
    elif msg.kind == KIND_OPERATION:
        assert msg.op is not None
        n += _OP_HEAD.size + len(msg.op.operand)
    else:
        n += len(msg.control)
    return n


def encode(msg: Message) -> bytes:
    body = [_HEAD.pack(msg.kind, msg.table_id, msg.tid, msg.source_worker, msg.seq_no, len(msg.key)), msg.key]
    if msg.kind == KIND_VALUE:
        body.append(_LEN.pack(msg.mask))
        body.append(encode_row(msg.fields))
    elif msg.kind == KIND_OPERATION:
        assert msg.op is not None
        body.append(_OP_HEAD.pack(msg.op.op_code, msg.op.field, len(msg.op.operand)))
        body.append(msg.op.operand)
    else:
        body.append(msg.control)
    payload = b"".join(body)
    return _LEN.pack(len(payload)) + payload


def decode(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one frame starting at offset; returns (message, next_offset)."""
    if offset + 4 > len(buf):
        raise DecodeError("truncated length prefix", offset)
    (length,) = _LEN.unpack_from(buf, offset)
    start = offset + 4
    end = start + length
    if end > len(buf):
        raise DecodeError("frame body exceeds buffer", start)
    if length < _HEAD.size:
        raise DecodeError("frame shorter than header", start)
    kind, table_id, tid, source_worker, seq_no, key_len = _HEAD.unpack_from(buf, start)
    pos = start + _HEAD.size
    if pos + key_len > end:
        raise DecodeError("truncated key", pos)
    key = buf[pos : pos + key_len]
    pos += key_len
    msg = Message(kind, table_id, tid, key, source_worker, seq_no)
    if kind == KIND_VALUE:
        if pos + 4 > end:
            raise DecodeError("truncated field mask", pos)
        (msg.mask,) = _LEN.unpack_from(buf, pos)
        try:
            msg.fields = decode_row(buf[pos + 4 : end])
        except ValueError as e:
            raise DecodeError(str(e), pos + 4) from None
        if len(msg.fields) != bin(msg.mask).count("1"):
            raise DecodeError("field count does not match mask", pos)
    elif kind == KIND_OPERATION:
        if pos + _OP_HEAD.size > end:
            raise DecodeError("truncated operation header", pos)
        op_code, fidx, op_len = _OP_HEAD.unpack_from(buf, pos)
        pos += _OP_HEAD.size
        if pos + op_len != end:
            raise DecodeError("operand length mismatch", pos)
        msg.op = OpDescriptor(op_code, fidx, buf[pos:end])
    elif kind == KIND_CONTROL:
        msg.control = buf[pos:end]
    else:
        raise DecodeError(f"unknown kind {kind}", start)
    return msg, end


def mask_fields(row: list[bytes], mask: int) -> list[bytes]:
    return [row[i] for i in range(len(row)) if mask & (1 << i)]


def merge_masked(old: bytes | None, mask: int, fields: list[bytes]) -> bytes:
    """Full post-image from a masked value payload and the pre-image."""
    row = decode_row(old) if old else []
    it = iter(fields)
    i = 0
    m = mask
    while m:
        if m & 1:
            while len(row) <= i:
                row.append(b"")
            row[i] = next(it)
        m >>= 1
        i += 1
    return encode_row(row)


def apply_message(msg: Message, partition: Partition, epoch: int) -> tuple[str, bytes | None]:
    """Apply one replication message to the local copy of its partition.

    Returns (status, full post-image). The post-image is what durability must
    log: operation messages are transformed into whole-record images here, so
    disk replay stays order-independent under the Thomas rule.
    """
    if msg.kind == KIND_VALUE:
        return partition.apply_with(
            msg.table_id, msg.key, msg.tid, epoch,
            lambda old: merge_masked(old, msg.mask, msg.fields),
        )
    if msg.kind == KIND_OPERATION:
        assert msg.op is not None

        def transform(old: bytes | None) -> bytes:
            row = decode_row(old) if old else []
            msg.op.apply(row)
            return encode_row(row)

        post = partition.apply_operation(msg.table_id, msg.key, msg.tid, epoch, transform)
        return "applied", post
    raise ValueError("control frames are not applied to storage")


class StreamChecker:
    """Tracks per-(source node, source worker) sequence numbers on the receive
    side; a gap on an operation message is fatal by protocol contract."""

    def __init__(self):
        self.last: dict[tuple[int, int], int] = {}

    def observe(self, msg: Message) -> None:
        stream = (msg.source_node, msg.source_worker)
        prev = self.last.get(stream, 0)
        if msg.kind == KIND_OPERATION and msg.seq_no != prev + 1:
            raise StreamOrderError(
                f"stream {stream}: operation seq {msg.seq_no} after {prev}"
            )
        if msg.seq_no > prev:
            self.last[stream] = msg.seq_no

    def reset(self, source_node: int) -> None:
        for stream in [s for s in self.last if s[0] == source_node]:
            del self.last[stream]


class ReplicationStats:
    """Monotone traffic counters, split by message kind and by peer."""

    def __init__(self):
        self.bytes_sent = {KIND_VALUE: 0, KIND_OPERATION: 0, KIND_CONTROL: 0}
        self.messages_sent: dict[int, int] = {}
        self.messages_applied: dict[int, int] = {}

    def on_send(self, dest: int, msg: Message) -> None:
        self.bytes_sent[msg.kind] += bytes_for(msg)
        self.messages_sent[dest] = self.messages_sent.get(dest, 0) + 1

    def on_apply(self, source: int) -> None:
        self.messages_applied[source] = self.messages_applied.get(source, 0) + 1

    def data_bytes(self) -> int:
        return self.bytes_sent[KIND_VALUE] + self.bytes_sent[KIND_OPERATION]
