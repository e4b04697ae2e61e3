"""Order-sensitive micro-workload backing the serializability oracle.

Rows have two fields: an i64 counter and a 16-byte mix digest. `hashmix`
chains a hash over the previous digest, so any two transactions touching the
same key commute only in the orders the engine actually serialized -- exactly
what a permutation oracle needs to bite on. `replay` applies one invocation
to a plain dict so an epoch can be brute-force checked against every serial
order of its committed transactions.
"""

from __future__ import annotations

import hashlib
import random
import struct
import sys
from dataclasses import dataclass

from ..engine import TxnApi, register_procedure
from ..replication import OP_ADD, OP_SET, OpDescriptor
from ..rows import decode_row, encode_row, pack_i64, unpack_i64
from ..storage import Partition
from ..tid import tid_pack
from .base import Invocation, TableSchema, register_workload

TABLE = 2
NAME = "probe"

_KEY = struct.Struct(">HB")

SET, ADD, MIX = "set", "add", "mix"


@dataclass
class ProbeParams:
    keys_per_partition: int = 4
    max_ops: int = 3
    cross_fraction: float = 0.3


def schemas(_params: ProbeParams | None = None) -> dict[int, TableSchema]:
    return {TABLE: TableSchema(TABLE, "probe", 2, 0b11)}


def key_of(partition: int, idx: int) -> bytes:
    return _KEY.pack(partition, idx)


def load_partition(part: Partition, pid: int, params: ProbeParams, seed: int) -> None:
    rng = random.Random((seed << 20) ^ (0xAB ^ pid))
    for i in range(params.keys_per_partition):
        row = [pack_i64(0), rng.randbytes(16)]
        part.load(TABLE, key_of(pid, i), encode_row(row), tid_pack(1, 0))


def _mix(digest: bytes, operand: bytes) -> bytes:
    return hashlib.blake2b(digest + operand, digest_size=16).digest()


def _apply_ops(read, write, ops) -> None:
    """Shared kernel between the stored procedure and the oracle replay."""
    for key, kind, operand in ops:
        row = decode_row(read(key))
        if kind == SET:
            row[1] = operand
            descriptors = (OpDescriptor(OP_SET, 1, operand),)
        elif kind == ADD:
            row[0] = pack_i64(unpack_i64(row[0]) + operand)
            descriptors = (OpDescriptor(OP_ADD, 0, operand.to_bytes(8, "little", signed=True)),)
        else:  # MIX: digest chains over the pre-image, so order matters
            row[1] = _mix(row[1], operand)
            descriptors = None
        write(key, encode_row(row), descriptors)


def txn(api: TxnApi, args: dict) -> None:
    _apply_ops(
        lambda k: api.read(TABLE, k),
        lambda k, v, ops: api.write(TABLE, k, v, ops),
        args["ops"],
    )


register_procedure("probe", txn)


def replay(state: dict[bytes, bytes], args: dict) -> None:
    """Apply one invocation to {key: row_bytes} with the same semantics."""
    _apply_ops(
        lambda k: state[k],
        lambda k, v, _ops: state.__setitem__(k, v),
        args["ops"],
    )


class Generator:
    def __init__(self, seed: int, params: ProbeParams, n_partitions: int):
        self.rng = random.Random(seed)
        self.params = params
        self.n_partitions = n_partitions

    def next(self, home: int) -> Invocation:
        p, rng = self.params, self.rng
        cross = self.n_partitions > 1 and rng.random() < p.cross_fraction
        n_ops = rng.randrange(1, p.max_ops + 1)
        parts = {home}
        ops = []
        seen: set[bytes] = set()
        for i in range(n_ops):
            if cross and i == 0:
                part = rng.choice([x for x in range(self.n_partitions) if x != home])
            else:
                part = home
            parts.add(part)
            key = key_of(part, rng.randrange(p.keys_per_partition))
            if key in seen:
                continue
            seen.add(key)
            kind = rng.choice((SET, ADD, MIX))
            operand = rng.randbytes(16) if kind != ADD else rng.randrange(1, 1000)
            ops.append((key, kind, operand))
        return Invocation("probe", {"ops": ops}, home, frozenset(parts))


register_workload(NAME, sys.modules[__name__])
