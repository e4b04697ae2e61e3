"""starkv: a replicated in-memory transactional KV engine with phase-switched execution.

Single-partition transactions run serially per partition on many nodes;
cross-partition transactions run under OCC on a node holding a full copy of
the database. Epoch-based group commit with replication fences keeps all
replicas convergent without two-phase commit.
"""

__version__ = "0.1.0"
