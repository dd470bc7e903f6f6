"""Replicated database that detects and repairs Byzantine data corruption.

Replicas execute one totally ordered log with deterministic concurrency,
maintain partitioned Merkle forests over their tables, and are compared by
majority vote per transaction and by digest at ``compareStates`` entries.
"""

from .store import Row, Snapshot, Store, TableSchema

__version__ = "0.1.0"

__all__ = ["Row", "Snapshot", "Store", "TableSchema", "__version__"]
