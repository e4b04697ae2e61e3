"""Epoch-embedded transaction identifiers packed into a single 64-bit word.

Layout: bit 63 = lock flag, bits 62..32 = epoch (31 bits), bits 31..0 =
per-epoch sequence. Packing an unlocked TID into one word makes the natural
integer order equal to (epoch, seq) lexicographic order, and lets the lock
flag and version be read or swapped as one atomic unit.
"""

from __future__ import annotations

from typing import NamedTuple

EPOCH_BITS = 31
SEQ_BITS = 32
MAX_EPOCH = (1 << EPOCH_BITS) - 1
MAX_SEQ = (1 << SEQ_BITS) - 1

LOCK_BIT = 1 << 63
TID_MASK = LOCK_BIT - 1  # low 63 bits of the meta word

# Reserved "never written" identifier.
TID_NEVER = 0


class Tid(NamedTuple):
    """Structured view of a transaction id. Compares in commit order."""

    epoch: int
    seq: int

    def pack(self) -> int:
        if not (0 <= self.epoch <= MAX_EPOCH and 0 <= self.seq <= MAX_SEQ):
            raise ValueError(f"tid out of range: {self}")
        return (self.epoch << SEQ_BITS) | self.seq

    def __str__(self) -> str:  # compact form for traces and errors
        return f"{self.epoch}.{self.seq}"


def tid_pack(epoch: int, seq: int) -> int:
    return Tid(epoch, seq).pack()


def tid_unpack(tid: int) -> Tid:
    return Tid((tid >> SEQ_BITS) & MAX_EPOCH, tid & MAX_SEQ)


def tid_epoch(tid: int) -> int:
    return (tid >> SEQ_BITS) & MAX_EPOCH


def tid_seq(tid: int) -> int:
    return tid & MAX_SEQ


def meta_pack(locked: bool, tid: int) -> int:
    if tid & ~TID_MASK:
        raise ValueError("tid overflows 63 bits")
    return (LOCK_BIT | tid) if locked else tid


def meta_unpack(word: int) -> tuple[bool, int]:
    return bool(word & LOCK_BIT), word & TID_MASK


def meta_locked(word: int) -> bool:
    return bool(word & LOCK_BIT)


def meta_tid(word: int) -> int:
    return word & TID_MASK
