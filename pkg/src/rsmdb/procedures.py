"""Registered stored procedures.

Clients never ship code: a request names a procedure and passes byte-string
arguments. Procedures must be deterministic functions of their arguments and
the rows they read; ``nondet_write`` deliberately is not.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import hashing
from .store import Row, Transaction, TxAbort

USERTABLE = "usertable"

Procedure = Callable[..., Any]


@dataclass
class ReplicaEnv:
    """Per-replica execution environment visible to procedures as ``tx.env``."""

    replica_id: int
    nondet_salt: bytes = b""
    _rng: Optional[random.Random] = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def random_bytes(self, n: int) -> bytes:
        with self._lock:
            if self._rng is None:
                self._rng = random.Random(hashing.digest(b"nondet" + self.nondet_salt))
            return self._rng.randbytes(n)


class ProcedureRegistry:
    def __init__(self) -> None:
        self._procs: dict[str, Procedure] = {}

    def register(self, name: str, fn: Optional[Procedure] = None):
        if fn is None:
            return lambda f: self.register(name, f)
        self._procs[name] = fn
        return fn

    def get(self, name: str) -> Optional[Procedure]:
        return self._procs.get(name)

    def names(self) -> list[str]:
        return sorted(self._procs)

    def __contains__(self, name: str) -> bool:
        return name in self._procs


def _int(arg: bytes) -> int:
    try:
        return int(arg.decode())
    except (UnicodeDecodeError, ValueError):
        raise TxAbort(f"bad integer argument {arg!r}") from None


def _row_result(row: Optional[Row]) -> Any:
    return None if row is None else (row.key, tuple(row.fields))


def ycsb_read(tx: Transaction, key: bytes) -> Any:
    return _row_result(tx.read(USERTABLE, key))


def ycsb_update(tx: Transaction, key: bytes, field_name: bytes, value: bytes) -> int:
    tx.update(USERTABLE, key, **{field_name.decode(): value})
    return 1


def ycsb_scan(tx: Transaction, start: bytes, count: bytes) -> Any:
    rows = tx.scan(USERTABLE, start, None, limit=_int(count))
    return (tuple(r.key for r in rows), hashing.digest(b"".join(r.encode() for r in rows)))


def ycsb_rmw(tx: Transaction, key: bytes, field_name: bytes, value: bytes) -> Any:
    name = field_name.decode()
    row = tx.read(USERTABLE, key)
    if row is None:
        raise TxAbort(f"missing key {key!r}")
    old = row.get(name)
    tx.update(USERTABLE, key, **{name: hashing.digest(old + value)[: len(value)] if old else value})
    return old


def ycsb_insert(tx: Transaction, key: bytes, *values: bytes) -> int:
    schema = tx.store.schema(USERTABLE)
    tx.insert(USERTABLE, schema.row(key, dict(zip(schema.fields, values))))
    return 1


def ycsb_delete(tx: Transaction, key: bytes) -> int:
    tx.delete(USERTABLE, key)
    return 1


def kv_get(tx: Transaction, table: bytes, key: bytes) -> Any:
    return _row_result(tx.read(table.decode(), key))


def kv_put(tx: Transaction, table: bytes, key: bytes, *pairs: bytes) -> int:
    """Upsert: ``pairs`` alternates field name and value."""
    name = table.decode()
    if len(pairs) % 2:
        raise TxAbort("field/value arguments must pair up")
    changes = {pairs[i].decode(): pairs[i + 1] for i in range(0, len(pairs), 2)}
    old = tx.read(name, key)
    if old is None:
        tx.insert(name, tx.store.schema(name).row(key, changes))
    else:
        tx.update(name, key, **changes)
    return 1


def kv_remove(tx: Transaction, table: bytes, key: bytes) -> int:
    tx.delete(table.decode(), key)
    return 1


def nondet_write(tx: Transaction, key: bytes, field_name: bytes) -> int:
    """Writes a replica-local random value; the status result is always 1."""
    row = tx.read(USERTABLE, key)
    if row is None:
        raise TxAbort(f"missing key {key!r}")
    size = len(row.get(field_name.decode()) or b"") or 16
    tx.update(USERTABLE, key, **{field_name.decode(): tx.env.random_bytes(size)})
    return 1


def default_registry() -> ProcedureRegistry:
    reg = ProcedureRegistry()
    reg.register("read", ycsb_read)
    reg.register("update", ycsb_update)
    reg.register("scan", ycsb_scan)
    reg.register("rmw", ycsb_rmw)
    reg.register("insert", ycsb_insert)
    reg.register("delete", ycsb_delete)
    reg.register("get", kv_get)
    reg.register("put", kv_put)
    reg.register("remove", kv_remove)
    reg.register("nondet_write", nondet_write)
    return reg


YCSB_PROCEDURES = ("read", "update", "scan", "rmw", "insert", "delete")
