"""Workload plumbing shared by YCSB, TPC-C and the oracle probe."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class TableSchema:
    table_id: int
    name: str
    n_fields: int
    replicated_mask: int  # bit i set -> field i is shipped in value messages


@dataclass
class Invocation:
    """One client request: a stored procedure call routed by partition."""

    proc: str
    args: dict
    home: int
    parts: frozenset[int] = field(default_factory=frozenset)

    @property
    def cross(self) -> bool:
        return len(self.parts) > 1


_WORKLOADS: dict[str, object] = {}


def register_workload(name: str, module: object) -> None:
    _WORKLOADS[name] = module


def workload_by_name(name: str):
    from . import probe, tpcc, ycsb  # noqa: F401  (registration side effect)

    try:
        return _WORKLOADS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}; have {sorted(_WORKLOADS)}") from None
