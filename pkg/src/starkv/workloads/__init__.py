"""Benchmark workloads: schemas, loaders, stored procedures and generators."""

from .base import Invocation, TableSchema, workload_by_name

__all__ = ["Invocation", "TableSchema", "workload_by_name"]
