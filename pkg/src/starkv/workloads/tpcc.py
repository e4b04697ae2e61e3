"""TPC-C NewOrder and Payment over warehouse-partitioned tables.

Every table is partitioned by warehouse id (one warehouse per partition); the
read-only item table is replicated into each partition. Money is integer
cents. Scale factors are configurable and default well below the standard
spec so desk-size runs stay fast; ratios, not absolute sizes, drive protocol
behaviour.

Payment's write set: warehouse YTD += h, district YTD += h, customer balance
-= h, plus a prepend into the fixed 500-byte customer data field when the
customer has bad credit. All four updates carry operation descriptors, so
under hybrid replication a Payment ships tiny deltas instead of the customer
record's 500-byte field.
"""

from __future__ import annotations

import random
import struct
import sys
from dataclasses import dataclass

from ..engine import TxnApi, register_procedure
from ..replication import OP_ADD, OP_CONCAT, OpDescriptor
from ..rows import decode_row, encode_row, pack_i64, unpack_i64
from ..storage import Partition
from ..tid import tid_pack
from .base import Invocation, TableSchema, register_workload

NAME = "tpcc"

WAREHOUSE = 10
DISTRICT = 11
CUSTOMER = 12
ITEM = 13
STOCK = 14
ORDERS = 15
ORDER_LINE = 16

# Customer field indexes; the replicated mask covers the columns the standard
# transaction suite may write (schema-level property, independent of which
# procedures a given deployment registers).
C_BALANCE, C_YTD_PAYMENT, C_PAYMENT_CNT, C_DELIVERY_CNT, C_DATA, C_CREDIT, C_LAST = range(7)
W_YTD, W_TAX, W_NAME = range(3)
D_NEXT_O_ID, D_YTD, D_TAX, D_NAME = range(4)
I_PRICE, I_NAME, I_DATA = range(3)
S_QUANTITY, S_YTD, S_ORDER_CNT, S_REMOTE_CNT, S_DATA = range(5)
O_C_ID, O_OL_CNT, O_ENTRY_D = range(3)
OL_I_ID, OL_SUPPLY_W, OL_QUANTITY, OL_AMOUNT = range(4)

_W = struct.Struct(">H")
_D = struct.Struct(">HB")
_C = struct.Struct(">HBH")
_I = struct.Struct(">HI")
_S = struct.Struct(">HI")
_O = struct.Struct(">HBI")
_OL = struct.Struct(">HBIB")

C_DATA_BYTES = 500


@dataclass
class TpccParams:
    districts: int = 10
    customers_per_district: int = 1000
    items: int = 1000
    new_order_remote_fraction: float = 0.10
    payment_remote_fraction: float = 0.15
    invalid_item_fraction: float = 0.01
    bad_credit_fraction: float = 0.10
    standard_mix: bool = True  # alternate NewOrder / Payment per worker
    payment_only: bool = False


def schemas(_params: TpccParams | None = None) -> dict[int, TableSchema]:
    def m(*bits: int) -> int:
        return sum(1 << b for b in bits)

    return {
        WAREHOUSE: TableSchema(WAREHOUSE, "warehouse", 3, m(W_YTD)),
        DISTRICT: TableSchema(DISTRICT, "district", 4, m(D_NEXT_O_ID, D_YTD)),
        CUSTOMER: TableSchema(CUSTOMER, "customer", 7,
                              m(C_BALANCE, C_YTD_PAYMENT, C_PAYMENT_CNT, C_DELIVERY_CNT, C_DATA)),
        ITEM: TableSchema(ITEM, "item", 3, 0),  # read-only, never replicated
        STOCK: TableSchema(STOCK, "stock", 5, m(S_QUANTITY, S_YTD, S_ORDER_CNT, S_REMOTE_CNT)),
        ORDERS: TableSchema(ORDERS, "orders", 3, m(O_C_ID, O_OL_CNT, O_ENTRY_D)),
        ORDER_LINE: TableSchema(ORDER_LINE, "order_line", 4,
                                m(OL_I_ID, OL_SUPPLY_W, OL_QUANTITY, OL_AMOUNT)),
    }


def wkey(w: int) -> bytes:
    return _W.pack(w)


def dkey(w: int, d: int) -> bytes:
    return _D.pack(w, d)


def ckey(w: int, d: int, c: int) -> bytes:
    return _C.pack(w, d, c)


def ikey(w: int, i: int) -> bytes:
    return _I.pack(w, i)


def skey(w: int, i: int) -> bytes:
    return _S.pack(w, i)


def okey(w: int, d: int, o: int) -> bytes:
    return _O.pack(w, d, o)


def olkey(w: int, d: int, o: int, line: int) -> bytes:
    return _OL.pack(w, d, o, line)


def load_partition(part: Partition, w: int, params: TpccParams, seed: int) -> None:
    rng = random.Random((seed << 20) ^ (0xCC ^ w))
    tid = tid_pack(1, 0)
    part.load(WAREHOUSE, wkey(w), encode_row([pack_i64(0), pack_i64(rng.randrange(2000)), b"WH%06d" % w]), tid)
    for d in range(1, params.districts + 1):
        part.load(DISTRICT, dkey(w, d), encode_row(
            [pack_i64(1), pack_i64(0), pack_i64(rng.randrange(2000)), b"D%03d" % d]), tid)
        for c in range(1, params.customers_per_district + 1):
            credit = b"BC" if rng.random() < params.bad_credit_fraction else b"GC"
            row = [pack_i64(-1000), pack_i64(1000), pack_i64(1), pack_i64(0),
                   rng.randbytes(C_DATA_BYTES), credit, b"CUST%08d" % c]
            part.load(CUSTOMER, ckey(w, d, c), encode_row(row), tid)
    for i in range(1, params.items + 1):
        part.load(ITEM, ikey(w, i), encode_row(
            [pack_i64(100 + rng.randrange(9900)), b"ITEM%06d" % i, rng.randbytes(26)]), tid)
        part.load(STOCK, skey(w, i), encode_row(
            [pack_i64(10 + rng.randrange(91)), pack_i64(0), pack_i64(0), pack_i64(0),
             rng.randbytes(26)]), tid)


def _add(field: int, delta: int) -> OpDescriptor:
    width = 4 if -(1 << 31) <= delta < (1 << 31) else 8
    return OpDescriptor(OP_ADD, field, delta.to_bytes(width, "little", signed=True))


def new_order(api: TxnApi, args: dict) -> None:
    w, d = args["w"], args["d"]
    api.read(WAREHOUSE, wkey(w))
    drow = decode_row(api.read(DISTRICT, dkey(w, d)))
    o_id = unpack_i64(drow[D_NEXT_O_ID])
    lines = args["lines"]  # [(item_id, supply_w, qty)]
    stock_updates = []
    amounts = []
    for item_id, supply_w, qty in lines:
        irow = api.read(ITEM, ikey(w, item_id))
        if irow is None:  # ~1% of orders carry an invalid item id
            api.abort("invalid item id")
        price = unpack_i64(decode_row(irow)[I_PRICE])
        srow = decode_row(api.read(STOCK, skey(supply_w, item_id)))
        quantity = unpack_i64(srow[S_QUANTITY])
        quantity = quantity - qty if quantity - qty >= 10 else quantity - qty + 91
        srow[S_QUANTITY] = pack_i64(quantity)
        srow[S_YTD] = pack_i64(unpack_i64(srow[S_YTD]) + qty)
        srow[S_ORDER_CNT] = pack_i64(unpack_i64(srow[S_ORDER_CNT]) + 1)
        if supply_w != w:
            srow[S_REMOTE_CNT] = pack_i64(unpack_i64(srow[S_REMOTE_CNT]) + 1)
        stock_updates.append((skey(supply_w, item_id), srow))
        amounts.append(price * qty)
    drow[D_NEXT_O_ID] = pack_i64(o_id + 1)
    api.write(DISTRICT, dkey(w, d), encode_row(drow), (_add(D_NEXT_O_ID, 1),))
    for key, srow in stock_updates:
        api.write(STOCK, key, encode_row(srow))  # several fields; value ships cheaper
    api.write(ORDERS, okey(w, d, o_id), encode_row(
        [pack_i64(args["c"]), pack_i64(len(lines)), pack_i64(args["entry_d"])]))
    for ln, (item_id, supply_w, qty) in enumerate(lines, start=1):
        api.write(ORDER_LINE, olkey(w, d, o_id, ln), encode_row(
            [pack_i64(item_id), pack_i64(supply_w), pack_i64(qty), pack_i64(amounts[ln - 1])]))


def payment(api: TxnApi, args: dict) -> None:
    w, d, h = args["w"], args["d"], args["h"]
    c_w, c_d, c = args["c_w"], args["c_d"], args["c"]
    wrow = decode_row(api.read(WAREHOUSE, wkey(w)))
    wrow[W_YTD] = pack_i64(unpack_i64(wrow[W_YTD]) + h)
    api.write(WAREHOUSE, wkey(w), encode_row(wrow), (_add(W_YTD, h),))
    drow = decode_row(api.read(DISTRICT, dkey(w, d)))
    drow[D_YTD] = pack_i64(unpack_i64(drow[D_YTD]) + h)
    api.write(DISTRICT, dkey(w, d), encode_row(drow), (_add(D_YTD, h),))
    crow = decode_row(api.read(CUSTOMER, ckey(c_w, c_d, c)))
    crow[C_BALANCE] = pack_i64(unpack_i64(crow[C_BALANCE]) - h)
    ops = [_add(C_BALANCE, -h)]
    if crow[C_CREDIT] == b"BC":
        info = b"%d %d %d %d %d %d" % (c, c_d, c_w, d, w, h)
        crow[C_DATA] = (info + crow[C_DATA])[:C_DATA_BYTES]
        ops.append(OpDescriptor(OP_CONCAT, C_DATA, info))
    api.write(CUSTOMER, ckey(c_w, c_d, c), encode_row(crow), tuple(ops))


register_procedure("tpcc_new_order", new_order)
register_procedure("tpcc_payment", payment)


class Generator:
    """Standard-mix stream: a NewOrder is followed by a Payment. Remote
    fractions decide whether a transaction crosses warehouses."""

    def __init__(self, seed: int, params: TpccParams, n_partitions: int):
        self.rng = random.Random(seed)
        self.params = params
        self.n_partitions = n_partitions
        self._next_is_payment = False

    def _foreign(self, w: int) -> int:
        others = [x for x in range(self.n_partitions) if x != w]
        return self.rng.choice(others)

    def _new_order(self, w: int) -> Invocation:
        p, rng = self.params, self.rng
        d = rng.randrange(1, p.districts + 1)
        c = rng.randrange(1, p.customers_per_district + 1)
        n_lines = rng.randrange(5, 16)
        remote = self.n_partitions > 1 and rng.random() < p.new_order_remote_fraction
        lines = []
        supply_parts = {w}
        remote_slot = rng.randrange(n_lines) if remote else -1
        seen: set[int] = set()
        for ln in range(n_lines):
            while True:
                item = rng.randrange(1, p.items + 1)
                if item not in seen:
                    seen.add(item)
                    break
            supply = self._foreign(w) if ln == remote_slot else w
            supply_parts.add(supply)
            lines.append((item, supply, rng.randrange(1, 11)))
        if rng.random() < p.invalid_item_fraction:
            lines[-1] = (p.items + 1 + rng.randrange(1000), lines[-1][1], lines[-1][2])
        args = {"w": w, "d": d, "c": c, "lines": lines, "entry_d": rng.randrange(1 << 31)}
        return Invocation("tpcc_new_order", args, w, frozenset(supply_parts))

    def _payment(self, w: int) -> Invocation:
        p, rng = self.params, self.rng
        d = rng.randrange(1, p.districts + 1)
        remote = self.n_partitions > 1 and rng.random() < p.payment_remote_fraction
        c_w = self._foreign(w) if remote else w
        args = {
            "w": w, "d": d, "c_w": c_w, "c_d": rng.randrange(1, p.districts + 1),
            "c": rng.randrange(1, p.customers_per_district + 1),
            "h": 100 + rng.randrange(500_000 - 100),
        }
        return Invocation("tpcc_payment", args, w, frozenset({w, c_w}))

    def next(self, home: int) -> Invocation:
        if self.params.payment_only:
            return self._payment(home)
        if self.params.standard_mix:
            self._next_is_payment = not self._next_is_payment
            if self._next_is_payment:
                return self._new_order(home)
            return self._payment(home)
        if self.rng.random() < 0.5:
            return self._new_order(home)
        return self._payment(home)


def consistency_check(resolver, partitions: list[int], params: TpccParams) -> list[str]:
    """Standard TPC-C invariants at a quiescent fence: per warehouse,
    W_YTD == sum of D_YTD; per district, D_NEXT_O_ID == max(O_ID) + 1."""
    violations = []
    for w in partitions:
        part = resolver(w)
        got = part.read(WAREHOUSE, wkey(w))
        if got is None:
            violations.append(f"warehouse {w} missing")
            continue
        w_ytd = unpack_i64(decode_row(got[0])[W_YTD])
        d_sum = 0
        for d in range(1, params.districts + 1):
            drow = decode_row(part.read(DISTRICT, dkey(w, d))[0])
            d_sum += unpack_i64(drow[D_YTD])
            next_o = unpack_i64(drow[D_NEXT_O_ID])
            max_o = 0
            prefix = _D.pack(w, d)
            for key in part.table(ORDERS):
                if key[:3] == prefix:
                    max_o = max(max_o, _O.unpack(key)[2])
            if next_o != max_o + 1:
                violations.append(f"w{w} d{d}: next_o_id {next_o} != max order {max_o} + 1")
        if w_ytd != d_sum:
            violations.append(f"w{w}: W_YTD {w_ytd} != sum D_YTD {d_sum}")
    return violations


register_workload(NAME, sys.modules[__name__])
