"""YCSB: one table of 10-field records, uniform key access, 10 operations per
transaction (9 reads + 1 read-modify-write that rewrites the whole record)."""

from __future__ import annotations

import random
import struct
import sys
from dataclasses import dataclass

from ..engine import TxnApi
from ..engine import register_procedure
from ..rows import encode_row
from ..storage import Partition
from ..tid import tid_pack
from .base import Invocation, TableSchema, register_workload

TABLE = 1
NAME = "ycsb"

_KEY = struct.Struct(">Q")


@dataclass
class YcsbParams:
    records_per_partition: int = 200_000
    fields_per_record: int = 10
    bytes_per_field: int = 10
    ops_per_txn: int = 10
    read_fraction: float = 0.9
    cross_fraction: float = 0.1
    foreign_keys_per_cross_txn: int = 2


def schemas(params: YcsbParams | None = None) -> dict[int, TableSchema]:
    p = params or YcsbParams()
    # Every field is rewritten by the RMW op, so all fields replicate.
    return {TABLE: TableSchema(TABLE, "usertable", p.fields_per_record,
                               (1 << p.fields_per_record) - 1)}


def key_of(partition: int, index: int) -> bytes:
    """64-bit primary key with the partition id in the high 16 bits."""
    return _KEY.pack((partition << 48) | index)


def load_partition(part: Partition, pid: int, params: YcsbParams, seed: int) -> None:
    rng = random.Random((seed << 20) ^ pid)
    tid = tid_pack(1, 0)
    nf, fb = params.fields_per_record, params.bytes_per_field
    for idx in range(params.records_per_partition):
        row = [rng.randbytes(fb) for _ in range(nf)]
        part.load(TABLE, key_of(pid, idx), encode_row(row), tid)


def txn(api: TxnApi, args: dict) -> None:
    nf = args["nf"]
    for key in args["reads"]:
        api.read(TABLE, key)
    wkey = args["write_key"]
    api.read(TABLE, wkey)
    blob = args["write_blob"]
    n = len(blob) // nf
    api.write(TABLE, wkey, encode_row([blob[i * n : (i + 1) * n] for i in range(nf)]))


register_procedure("ycsb", txn)


class Generator:
    """Per-worker deterministic transaction stream."""

    def __init__(self, seed: int, params: YcsbParams, n_partitions: int):
        self.rng = random.Random(seed)
        self.params = params
        self.n_partitions = n_partitions

    def next(self, home: int) -> Invocation:
        p = self.params
        rng = self.rng
        cross = self.n_partitions > 1 and rng.random() < p.cross_fraction
        key_parts = [home] * p.ops_per_txn
        if cross:
            others = [x for x in range(self.n_partitions) if x != home]
            for slot in rng.sample(range(p.ops_per_txn), min(p.foreign_keys_per_cross_txn, p.ops_per_txn)):
                key_parts[slot] = rng.choice(others)
        keys, seen = [], set()
        for kp in key_parts:
            while True:
                k = key_of(kp, rng.randrange(p.records_per_partition))
                if k not in seen:
                    seen.add(k)
                    keys.append(k)
                    break
        w = rng.randrange(p.ops_per_txn)
        args = {
            "reads": [k for i, k in enumerate(keys) if i != w],
            "write_key": keys[w],
            "write_blob": rng.randbytes(p.fields_per_record * p.bytes_per_field),
            "nf": p.fields_per_record,
        }
        return Invocation("ycsb", args, home, frozenset(key_parts))


register_workload(NAME, sys.modules[__name__])
