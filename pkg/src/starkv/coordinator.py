"""Phase-switching control logic: duration solver, cluster placement, fence
bookkeeping and failure classification.

The pieces here are pure (no I/O); the simulator and the process-mode
coordinator drive them over their respective transports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .replication import KIND_CONTROL, Message

PHASE_PARTITIONED = "partitioned"
PHASE_SINGLE_MASTER = "single_master"

# Cluster execution modes (recovery can demote the cluster).
MODE_PHASE_SWITCHING = "phase_switching"
MODE_FALLBACK_DIST = "fallback_dist"     # no full replica: distributed CC
MODE_SINGLE_MASTER_ONLY = "single_master_only"  # no partials: one-node world
MODE_HALT = "halt"

CASE_1, CASE_2, CASE_3, CASE_4 = 1, 2, 3, 4

# Control frame codes (frame.table_id carries the code, frame.tid the epoch).
CTRL_PHASE_START = 1
CTRL_FENCE_BEGIN = 2
CTRL_FENCE_REPORT = 3
CTRL_FENCE_EXPECT = 4
CTRL_FENCE_ACK = 5
CTRL_FENCE_RELEASE = 6
CTRL_RECOVERY = 7
CTRL_HELLO = 8
CTRL_STOP = 9
CTRL_RPC = 10       # baseline request/response envelope (sim)
CTRL_RPC_REPLY = 11
CTRL_COPY = 12      # partition snapshot chunk for peer recovery


def control(code: int, epoch: int = 0, **fields) -> Message:
    return Message(
        kind=KIND_CONTROL, table_id=code, tid=epoch, key=b"",
        control=json.dumps(fields, sort_keys=True).encode(),
    )


def control_fields(msg: Message) -> dict:
    return json.loads(msg.control) if msg.control else {}


def compute_phase_durations(e: float, t_p: float, t_s: float, p: float) -> tuple[float, float]:
    """Split the iteration time e into (tau_p, tau_s) such that
    tau_p + tau_s = e and the single-master share of commits equals the
    cross-partition fraction p:  tau_s*t_s / (tau_p*t_p + tau_s*t_s) = p.

    Degenerate ends: p == 0 gives (e, 0) (t_s need not be defined), and
    p == 1 gives (0, e).
    """
    if e <= 0:
        raise ValueError("iteration time must be positive")
    if not 0.0 <= p <= 1.0:
        raise ValueError("cross-partition fraction out of [0, 1]")
    if p == 0.0:
        return e, 0.0
    if p == 1.0:
        return 0.0, e
    if t_p <= 0 or t_s <= 0:
        raise ValueError("throughputs must be positive for 0 < p < 1")
    tau_s = e * p * t_p / (t_s * (1.0 - p) + p * t_p)
    return e - tau_s, tau_s


def expected_mean_latency(tau_p: float, tau_s: float) -> float:
    """Mean latency of uniformly arriving transactions under deferral-based
    phase switching; holds for single- and cross-partition alike."""
    return (tau_p + tau_s) / 2.0


class RateEstimator:
    """EWMA of measured phase throughputs and cross-partition fraction."""

    def __init__(self, alpha: float = 0.25):
        self.alpha = alpha
        self.t_p: float | None = None
        self.t_s: float | None = None
        self.p: float | None = None

    def _mix(self, old: float | None, x: float) -> float:
        return x if old is None else self.alpha * x + (1.0 - self.alpha) * old

    def observe_partitioned(self, rate: float) -> None:
        self.t_p = self._mix(self.t_p, rate)

    def observe_single_master(self, rate: float) -> None:
        self.t_s = self._mix(self.t_s, rate)

    def observe_fraction(self, p: float) -> None:
        self.p = self._mix(self.p, p)

    def plan(self, e: float, default_p: float) -> tuple[float, float]:
        """Durations for the next iteration; seeds tau_s = e/2 while the
        single-master rate is still unmeasured."""
        p = self.p if self.p is not None else default_p
        p = min(max(p, 0.0), 1.0)
        if p == 0.0:
            return e, 0.0
        if p == 1.0:
            return 0.0, e
        if self.t_p is None or self.t_s is None or self.t_s <= 0 or self.t_p <= 0:
            return e / 2.0, e / 2.0
        return compute_phase_durations(e, self.t_p, self.t_s, p)


@dataclass
class FenceReport:
    node_id: int
    committed: int
    sent: dict[int, int]      # destination node -> replication frames sent
    applied: dict[int, int]   # source node -> replication frames applied
    flushed: bool = True
    digests: dict[int, int] = field(default_factory=dict)  # partition -> digest

    def to_fields(self) -> dict:
        return {
            "node": self.node_id, "committed": self.committed,
            "sent": {str(k): v for k, v in self.sent.items()},
            "applied": {str(k): v for k, v in self.applied.items()},
            "flushed": self.flushed,
            "digests": {str(k): v for k, v in self.digests.items()},
        }

    @classmethod
    def from_fields(cls, d: dict) -> "FenceReport":
        return cls(
            node_id=d["node"], committed=d["committed"],
            sent={int(k): v for k, v in d["sent"].items()},
            applied={int(k): v for k, v in d["applied"].items()},
            flushed=d["flushed"],
            digests={int(k): v for k, v in d.get("digests", {}).items()},
        )


def drain_targets(reports: dict[int, FenceReport]) -> dict[int, dict[int, int]]:
    """For each node, how many frames from each source it must have applied
    before the fence may complete (applied == sent for every pair)."""
    expect: dict[int, dict[int, int]] = {nid: {} for nid in reports}
    for src, rep in reports.items():
        for dst, n in rep.sent.items():
            if dst in expect:
                expect[dst][src] = n
    return expect


def digests_consistent(reports: dict[int, FenceReport]) -> list[int]:
    """Partitions whose digests disagree across the nodes hosting them."""
    seen: dict[int, set[int]] = {}
    for rep in reports.values():
        for pid, dig in rep.digests.items():
            seen.setdefault(pid, set()).add(dig)
    return sorted(pid for pid, ds in seen.items() if len(ds) > 1)


@dataclass
class ClusterConfig:
    """Asymmetric replica layout: nodes [0, f) hold full copies, nodes
    [f, f+k) hold partial copies. Partition p's partitioned-phase primary is
    partial node f + (p mod k) with a partial backup on f + ((p+1) mod k);
    full nodes hold every partition. The designated master is node 0."""

    f: int
    k: int
    partitions: int
    iteration_ms: float = 10.0

    def __post_init__(self):
        if self.f < 1 or self.k < 1:
            raise ValueError("need at least one full and one partial replica")
        self.n = self.f + self.k
        self.master_node = 0

    def full_nodes(self) -> list[int]:
        return list(range(self.f))

    def partial_nodes(self) -> list[int]:
        return list(range(self.f, self.n))

    def is_full(self, node: int) -> bool:
        return node < self.f

    def primary_of(self, p: int) -> int:
        return self.f + (p % self.k)

    def partial_backup_of(self, p: int) -> int | None:
        if self.k == 1:
            return None
        b = self.f + ((p + 1) % self.k)
        return b

    def partial_holders(self, p: int) -> list[int]:
        holders = [self.primary_of(p)]
        b = self.partial_backup_of(p)
        if b is not None:
            holders.append(b)
        return holders

    def holders_of(self, p: int) -> list[int]:
        return self.full_nodes() + self.partial_holders(p)

    def hosted_partitions(self, node: int) -> list[int]:
        if self.is_full(node):
            return list(range(self.partitions))
        return [p for p in range(self.partitions) if node in self.partial_holders(p)]

    def default_masters(self) -> dict[int, int]:
        return {p: self.primary_of(p) for p in range(self.partitions)}

    def replica_targets(self, p: int, origin: int) -> list[int]:
        return [nid for nid in self.holders_of(p) if nid != origin]

    def to_dict(self) -> dict:
        return {"f": self.f, "k": self.k, "partitions": self.partitions,
                "iteration_ms": self.iteration_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        return cls(f=d["f"], k=d["k"], partitions=d["partitions"],
                   iteration_ms=d.get("iteration_ms", 10.0))


def coverage_intact(alive: set[int], config: ClusterConfig) -> bool:
    """True if the surviving partial replicas still jointly hold at least one
    copy of every partition."""
    return all(
        any(nid in alive for nid in config.partial_holders(p))
        for p in range(config.partitions)
    )


def classify_recovery(alive: set[int], config: ClusterConfig) -> int:
    full_alive = any(nid in alive for nid in config.full_nodes())
    covered = coverage_intact(alive, config)
    if full_alive and covered:
        return CASE_1
    if covered:
        return CASE_2
    if full_alive:
        return CASE_3
    return CASE_4


@dataclass
class RecoveryPlan:
    case: int
    mode: str
    masters: dict[int, int]
    master_node: int


def apply_recovery(case: int, alive: set[int], config: ClusterConfig) -> RecoveryPlan:
    """Post-failure execution plan: who masters which partition, and whether
    phase switching can continue."""
    alive_fulls = [nid for nid in config.full_nodes() if nid in alive]
    master = alive_fulls[0] if alive_fulls else min(alive) if alive else -1

    def surviving_partial(p: int) -> int | None:
        for nid in config.partial_holders(p):
            if nid in alive:
                return nid
        return None

    masters: dict[int, int] = {}
    if case == CASE_1:
        for p in range(config.partitions):
            owner = config.primary_of(p)
            masters[p] = owner if owner in alive else (surviving_partial(p) or master)
        return RecoveryPlan(case, MODE_PHASE_SWITCHING, masters, master)
    if case == CASE_2:
        for p in range(config.partitions):
            masters[p] = surviving_partial(p)  # coverage guarantees not-None
        return RecoveryPlan(case, MODE_FALLBACK_DIST, masters, -1)
    if case == CASE_3:
        any_partial_alive = any(nid in alive for nid in config.partial_nodes())
        for p in range(config.partitions):
            masters[p] = surviving_partial(p) or master
        mode = MODE_PHASE_SWITCHING if any_partial_alive else MODE_SINGLE_MASTER_ONLY
        return RecoveryPlan(case, mode, masters, master)
    return RecoveryPlan(case, MODE_HALT, {}, -1)
