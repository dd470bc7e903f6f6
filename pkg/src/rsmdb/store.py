"""Embedded multi-version table store.

Tables are ordered maps from byte-string primary keys to rows. Every key owns
a version chain of ``(csn, tx_id, row-or-None)`` tuples where ``csn`` is the
store-wide commit sequence number. A snapshot is just a csn, so reads at a
snapshot never change once taken. Log-driven commits advance both the csn and
the transaction id; maintenance commits (bootstrap, repair, fault injection)
advance only the csn.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional

from sortedcontainers import SortedList

from . import hashing

MIN_KEY = b""
_LEN = struct.Struct(">I")


class StoreError(Exception):
    pass


class UnknownTable(StoreError):
    pass


class OutOfOrderCommit(StoreError):
    pass


class ConstraintViolation(StoreError):
    pass


class TxAbort(Exception):
    """Raised by a procedure to fail deterministically; its writes are dropped."""


class Row:
    """An immutable row: a primary key plus ordered ``(name, value)`` fields."""

    __slots__ = ("key", "fields", "_enc", "_hash")

    def __init__(self, key: bytes, fields: Iterable[tuple[str, bytes]] = ()):
        if not isinstance(key, bytes) or not key:
            raise ValueError("row key must be a non-empty byte string")
        fields = tuple((str(n), bytes(v)) for n, v in fields)
        if len({n for n, _ in fields}) != len(fields):
            raise ValueError("duplicate field name in row")
        self.key = key
        self.fields = fields
        self._enc: Optional[bytes] = None
        self._hash: Optional[bytes] = None

    def get(self, name: str, default: Optional[bytes] = None) -> Optional[bytes]:
        for n, v in self.fields:
            if n == name:
                return v
        return default

    def replace(self, **changes: bytes) -> "Row":
        unknown = set(changes) - {n for n, _ in self.fields}
        if unknown:
            raise KeyError(f"unknown fields {sorted(unknown)}")
        return Row(self.key, ((n, changes.get(n, v)) for n, v in self.fields))

    def encode(self) -> bytes:
        enc = self._enc
        if enc is None:
            parts = [_LEN.pack(len(self.key)), self.key, _LEN.pack(len(self.fields))]
            for n, v in self.fields:
                nb = n.encode("utf-8")
                parts += (_LEN.pack(len(nb)), nb, _LEN.pack(len(v)), v)
            enc = self._enc = b"".join(parts)
        return enc

    def hash(self) -> bytes:
        h = self._hash
        if h is None:
            h = self._hash = hashing.digest(self.encode())
        return h

    @classmethod
    def decode(cls, data: bytes) -> "Row":
        pos = 0

        def take() -> bytes:
            nonlocal pos
            (n,) = _LEN.unpack_from(data, pos)
            pos += 4
            chunk = data[pos : pos + n]
            pos += n
            return chunk

        key = take()
        (count,) = _LEN.unpack_from(data, pos)
        pos += 4
        fields = [(take().decode("utf-8"), take()) for _ in range(count)]
        if pos != len(data):
            raise ValueError("trailing bytes after row")
        return cls(key, fields)

    def as_dict(self) -> dict[str, bytes]:
        return dict(self.fields)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Row) and self.key == other.key and self.fields == other.fields

    def __hash__(self) -> int:
        return hash((self.key, self.fields))

    def __repr__(self) -> str:
        return f"Row({self.key!r}, {dict(self.fields)!r})"


@dataclass(frozen=True)
class TableSchema:
    name: str
    fields: tuple[str, ...]

    def row(self, key: bytes, values: Mapping[str, bytes] | None = None) -> Row:
        values = values or {}
        unknown = set(values) - set(self.fields)
        if unknown:
            raise KeyError(f"{self.name}: unknown fields {sorted(unknown)}")
        return Row(key, ((f, values.get(f, b"")) for f in self.fields))


@dataclass(frozen=True)
class Snapshot:
    csn: int
    visible_through: int

    @property
    def snapshot_id(self) -> str:
        return f"{self.visible_through}@{self.csn}"


class RwSet:
    """Point reads, closed range reads and writes of one transaction execution.

    ``hi=None`` in a range read stands for +infinity.
    """

    __slots__ = ("point_reads", "ranges", "writes")

    def __init__(self) -> None:
        self.point_reads: set[tuple[str, bytes]] = set()
        self.ranges: dict[str, list[tuple[bytes, Optional[bytes]]]] = {}
        self.writes: dict[tuple[str, bytes], str] = {}

    @property
    def range_reads(self) -> list[tuple[str, bytes, Optional[bytes]]]:
        return [(t, lo, hi) for t, rs in self.ranges.items() for lo, hi in rs]

    def add_range(self, table: str, lo: bytes, hi: Optional[bytes]) -> None:
        if hi is not None and lo > hi:
            raise ValueError("range lower bound exceeds upper bound")
        self.ranges.setdefault(table, []).append((lo, hi))

    def in_ranges(self, table: str, key: bytes) -> bool:
        for lo, hi in self.ranges.get(table, ()):
            if lo <= key and (hi is None or key <= hi):
                return True
        return False

    def conflicts_with(self, committed: "RwSet") -> bool:
        """True if ``committed``'s writes hit our reads, ranges or writes."""
        reads = self.point_reads
        writes = self.writes
        ranges = self.ranges
        for item in committed.writes:
            if item in reads or item in writes:
                return True
            if ranges and item[0] in ranges and self.in_ranges(item[0], item[1]):
                return True
        return False

    def __repr__(self) -> str:
        return (
            f"RwSet(reads={len(self.point_reads)}, ranges={len(self.range_reads)}, "
            f"writes={len(self.writes)})"
        )


@dataclass(frozen=True)
class ReferentialRule:
    child_table: str
    child_field: str
    parent_table: str


class ConstraintRegistry:
    """Referential rules: a child's field value must name an existing parent key.

    An empty field value means "no reference". While disabled, commits bypass
    checking; ``enable`` revalidates the whole store first.
    """

    def __init__(self) -> None:
        self.rules: list[ReferentialRule] = []
        self.enabled = True

    def add(self, child_table: str, child_field: str, parent_table: str) -> None:
        self.rules.append(ReferentialRule(child_table, child_field, parent_table))

    def disable(self) -> None:
        self.enabled = False

    def enable(self, store: "Store") -> None:
        problems = self.revalidate(store)
        if problems:
            raise ConstraintViolation(f"revalidation failed: {problems[:5]}")
        self.enabled = True

    def check(self, store: "Store", writes: Mapping[tuple[str, bytes], Optional[Row]]) -> None:
        if not self.enabled or not self.rules:
            return

        def exists(table: str, key: bytes) -> bool:
            if (table, key) in writes:
                return writes[(table, key)] is not None
            return store.latest(table, key) is not None

        for rule in self.rules:
            for (table, key), row in writes.items():
                if table == rule.child_table and row is not None:
                    ref = row.get(rule.child_field)
                    if ref and not exists(rule.parent_table, ref):
                        raise ConstraintViolation(
                            f"{table}[{key!r}].{rule.child_field} -> missing {rule.parent_table}[{ref!r}]"
                        )
                if table == rule.parent_table and row is None:
                    for child in store.latest_rows(rule.child_table):
                        if (rule.child_table, child.key) in writes:
                            child = writes[(rule.child_table, child.key)]
                            if child is None:
                                continue
                        if child.get(rule.child_field) == key:
                            raise ConstraintViolation(
                                f"delete of {table}[{key!r}] orphans {rule.child_table}[{child.key!r}]"
                            )

    def revalidate(self, store: "Store") -> list[str]:
        problems = []
        for rule in self.rules:
            for child in store.latest_rows(rule.child_table):
                ref = child.get(rule.child_field)
                if ref and store.latest(rule.parent_table, ref) is None:
                    problems.append(f"{rule.child_table}[{child.key!r}] -> {rule.parent_table}[{ref!r}]")
        return problems


# (table, key, old_row, new_row, csn) -> None
RowHook = Callable[[bytes, Optional[Row], Optional[Row], int], None]


class _Table:
    __slots__ = ("schema", "system", "versions", "keys")

    def __init__(self, schema: TableSchema, system: bool) -> None:
        self.schema = schema
        self.system = system
        self.versions: dict[bytes, list[tuple[int, int, Optional[Row]]]] = {}
        self.keys = SortedList()


class Store:
    def __init__(self) -> None:
        # Guards commits and snapshot acquisition; detexec builds its
        # condition variable on this same lock.
        self.commit_lock = threading.RLock()
        self._index_lock = threading.Lock()
        self._tables: dict[str, _Table] = {}
        self._csn = 0
        self._last_tx = 0
        self._history: list[tuple[int, list[tuple[str, bytes]]]] = []
        self._hooks: dict[str, list[RowHook]] = {}
        self._shadows: dict[str, Callable[[bytes], tuple[tuple[str, bytes], ...]]] = {}
        self.constraints = ConstraintRegistry()

    # -- schema -----------------------------------------------------------

    def create_table(self, schema: TableSchema, system: bool = False) -> None:
        if schema.name in self._tables:
            raise StoreError(f"table {schema.name} exists")
        self._tables[schema.name] = _Table(schema, system)

    def has_table(self, name: str) -> bool:
        return name in self._tables

    def schema(self, name: str) -> TableSchema:
        return self._table(name).schema

    def table_names(self, include_system: bool = True) -> list[str]:
        return sorted(n for n, t in self._tables.items() if include_system or not t.system)

    def add_hook(self, table: str, hook: RowHook) -> None:
        self._table(table)
        self._hooks.setdefault(table, []).append(hook)

    def remove_hooks(self, table: str) -> None:
        self._hooks.pop(table, None)

    def set_write_shadow(self, table: str, fn: Callable[[bytes], tuple[tuple[str, bytes], ...]]) -> None:
        """Register extra (table, key) items a write to ``table`` implicitly touches."""
        self._shadows[table] = fn

    def clear_write_shadow(self, table: str) -> None:
        self._shadows.pop(table, None)

    def shadow_items(self, items: Iterable[tuple[str, bytes]]) -> dict[tuple[str, bytes], str]:
        shadows = self._shadows
        extra: dict[tuple[str, bytes], str] = {}
        if shadows:
            for table, key in items:
                fn = shadows.get(table)
                if fn is not None:
                    for item in fn(key):
                        extra[item] = "update"
        return extra

    def _table(self, name: str) -> _Table:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTable(name) from None

    # -- snapshots & reads -------------------------------------------------

    @property
    def last_tx_id(self) -> int:
        return self._last_tx

    @property
    def csn(self) -> int:
        return self._csn

    def take_snapshot(self) -> Snapshot:
        with self.commit_lock:
            return Snapshot(self._csn, self._last_tx)

    def read_at(self, snap: Snapshot, table: str, key: bytes) -> Optional[Row]:
        chain = self._table(table).versions.get(key)
        if not chain:
            return None
        last = chain[-1]
        if last[0] <= snap.csn:
            return last[2]
        for i in range(len(chain) - 2, -1, -1):
            v = chain[i]
            if v[0] <= snap.csn:
                return v[2]
        return None

    def scan_at(
        self,
        snap: Snapshot,
        table: str,
        lo: bytes = MIN_KEY,
        hi: Optional[bytes] = None,
        limit: Optional[int] = None,
    ) -> list[Row]:
        if hi is not None and lo > hi:
            raise ValueError("range lower bound exceeds upper bound")
        rows = []
        for key in self._candidate_keys(table, lo, hi):
            row = self.read_at(snap, table, key)
            if row is not None:
                rows.append(row)
                if limit is not None and len(rows) >= limit:
                    break
        return rows

    def _candidate_keys(self, table: str, lo: bytes, hi: Optional[bytes]) -> list[bytes]:
        tbl = self._table(table)
        with self._index_lock:
            return list(tbl.keys.irange(lo, hi))

    def latest(self, table: str, key: bytes) -> Optional[Row]:
        chain = self._table(table).versions.get(key)
        return chain[-1][2] if chain else None

    def latest_rows(self, table: str) -> Iterator[Row]:
        tbl = self._table(table)
        for key in self._candidate_keys(table, MIN_KEY, None):
            chain = tbl.versions.get(key)
            if chain and chain[-1][2] is not None:
                yield chain[-1][2]

    def rows_at(self, snap: Snapshot, table: str) -> list[Row]:
        return self.scan_at(snap, table)

    def version_chain(self, table: str, key: bytes) -> list[tuple[int, int, Optional[Row]]]:
        return list(self._table(table).versions.get(key, ()))

    # -- writes ------------------------------------------------------------

    def put_version(self, table: str, key: bytes, row: Optional[Row], csn: int) -> None:
        """Install one version at ``csn``; caller must hold ``commit_lock``.

        Repeated writes of the same key within one csn replace each other.
        """
        tbl = self._table(table)
        chain = tbl.versions.get(key)
        entry = (csn, self._last_tx, row)
        if chain is None:
            tbl.versions[key] = [entry]
            with self._index_lock:
                tbl.keys.add(key)
        elif chain[-1][0] == csn:
            chain[-1] = entry
        else:
            chain.append(entry)
        self._history[-1][1].append((table, key))

    def _apply(self, writes: Mapping[tuple[str, bytes], Optional[Row]], run_hooks: bool) -> None:
        csn = self._csn + 1
        self._history.append((csn, []))
        self._csn = csn
        hooks = self._hooks if run_hooks else {}
        for (table, key), row in writes.items():
            tbl = self._table(table)
            if row is not None and row.key != key:
                raise StoreError("row key does not match write key")
            chain = tbl.versions.get(key)
            old = chain[-1][2] if chain else None
            self.put_version(table, key, row, csn)
            for hook in hooks.get(table, ()):
                hook(key, old, row, csn)

    def commit_writes(self, tx_id: int, writes: Mapping[tuple[str, bytes], Optional[Row]]) -> int:
        """Commit ``writes`` as transaction ``tx_id``; returns the new csn.

        Raises ``ConstraintViolation`` (nothing applied) when an enabled
        referential rule fails.
        """
        with self.commit_lock:
            if tx_id != self._last_tx + 1:
                raise OutOfOrderCommit(f"commit of {tx_id} after {self._last_tx}")
            self.constraints.check(self, writes)
            self._last_tx = tx_id
            self._apply(writes, run_hooks=True)
            return self._csn

    def apply_maintenance(
        self, writes: Mapping[tuple[str, bytes], Optional[Row]], run_hooks: bool = True
    ) -> int:
        """Apply writes outside the log (bootstrap, repair, fault injection)."""
        with self.commit_lock:
            self._apply(writes, run_hooks=run_hooks)
            return self._csn

    def revert_to(self, snap: Snapshot) -> int:
        """Drop every version newer than ``snap``; returns versions dropped.

        Snapshots taken after ``snap`` become meaningless afterwards.
        """
        dropped = 0
        with self.commit_lock:
            while self._history and self._history[-1][0] > snap.csn:
                _, items = self._history.pop()
                for table, key in items:
                    chain = self._tables[table].versions[key]
                    while chain and chain[-1][0] > snap.csn:
                        chain.pop()
                        dropped += 1
            self._last_tx = snap.visible_through
        return dropped

    def begin(self, snap: Snapshot, latency: float = 0.0, env: Any = None) -> "Transaction":
        return Transaction(self, snap, latency=latency, env=env)

    # -- canonical dump ----------------------------------------------------

    def canonical_dump(self, snap: Optional[Snapshot] = None, tables: Optional[Iterable[str]] = None) -> list[str]:
        """Tables in name order, rows in key order; one hex line per row."""
        snap = snap or self.take_snapshot()
        names = sorted(tables) if tables is not None else self.table_names()
        lines = []
        for name in names:
            prefix = _LEN.pack(len(name.encode())) + name.encode()
            for row in self.scan_at(snap, name):
                lines.append((prefix + row.encode()).hex())
        return lines

    def save_dump(self, path: str, snap: Optional[Snapshot] = None) -> None:
        with open(path, "w") as fh:
            for line in self.canonical_dump(snap):
                fh.write(line + "\n")

    @classmethod
    def load_dump(cls, lines: Iterable[str]) -> "Store":
        store = cls()
        writes: dict[tuple[str, bytes], Row] = {}
        for line in lines:
            line = line.strip()
            if not line:
                continue
            raw = bytes.fromhex(line)
            (n,) = _LEN.unpack_from(raw, 0)
            name = raw[4 : 4 + n].decode()
            row = Row.decode(raw[4 + n :])
            if not store.has_table(name):
                store.create_table(TableSchema(name, tuple(f for f, _ in row.fields)))
            writes[(name, row.key)] = row
        store.apply_maintenance(writes, run_hooks=False)
        return store


class Transaction:
    """One execution of a procedure against a snapshot.

    Reads see the snapshot overlaid with this transaction's buffered writes.
    Reads of keys already written here do not enter the read set.
    ``latency`` models a storage round trip per statement (seconds).
    """

    __slots__ = ("store", "snapshot", "rw", "_buf", "_latency", "env", "fallback")

    def __init__(self, store: Store, snapshot: Snapshot, latency: float = 0.0, env: Any = None) -> None:
        self.store = store
        self.snapshot = snapshot
        self.rw = RwSet()
        self._buf: dict[tuple[str, bytes], Optional[Row]] = {}
        self._latency = latency
        self.env = env
        # writes still committed if the full write set violates a constraint
        self.fallback: dict[tuple[str, bytes], Optional[Row]] = {}

    def _statement(self) -> None:
        if self._latency:
            time.sleep(self._latency)

    def read(self, table: str, key: bytes) -> Optional[Row]:
        self._statement()
        item = (table, key)
        if item in self._buf:
            return self._buf[item]
        row = self.store.read_at(self.snapshot, table, key)
        self.rw.point_reads.add(item)
        return row

    def scan(
        self, table: str, lo: bytes = MIN_KEY, hi: Optional[bytes] = None, limit: Optional[int] = None
    ) -> list[Row]:
        """Rows with ``lo <= key <= hi`` in key order, at most ``limit`` of them.

        The recorded phantom interval is shrunk to the last returned key when
        the limit cut the result short.
        """
        self._statement()
        if hi is not None and lo > hi:
            raise ValueError("range lower bound exceeds upper bound")
        own = {k: r for (t, k), r in self._buf.items() if t == table and lo <= k and (hi is None or k <= hi)}
        merged: dict[bytes, Optional[Row]] = {}
        fetch = None if limit is None else limit + sum(1 for r in own.values() if r is None)
        for row in self.store.scan_at(self.snapshot, table, lo, hi, fetch):
            merged[row.key] = row
        merged.update(own)
        rows = [merged[k] for k in sorted(merged) if merged[k] is not None]
        recorded_hi = hi
        if limit is not None and len(rows) >= limit:
            rows = rows[:limit]
            recorded_hi = rows[-1].key if rows else hi
        self.rw.add_range(table, lo, recorded_hi)
        return rows

    def _old(self, table: str, key: bytes) -> Optional[Row]:
        item = (table, key)
        if item in self._buf:
            return self._buf[item]
        return self.store.read_at(self.snapshot, table, key)

    def _write(self, table: str, key: bytes, row: Optional[Row], op: str) -> None:
        self._statement()
        item = (table, key)
        self._buf[item] = row
        self.rw.writes[item] = op

    def put(self, table: str, row: Row) -> None:
        """Blind upsert; does not read the previous value."""
        self.store._table(table)
        self._write(table, row.key, row, "update")

    def insert(self, table: str, row: Row) -> None:
        if self.read(table, row.key) is not None:
            raise TxAbort(f"duplicate key {row.key!r} in {table}")
        self._write(table, row.key, row, "insert")

    def update(self, table: str, key: bytes, **changes: bytes) -> Row:
        old = self.read(table, key)
        if old is None:
            raise TxAbort(f"missing key {key!r} in {table}")
        new = old.replace(**changes)
        self._write(table, key, new, "update")
        return new

    def delete(self, table: str, key: bytes) -> None:
        if self.read(table, key) is None:
            raise TxAbort(f"missing key {key!r} in {table}")
        self._write(table, key, None, "delete")

    def savepoint(self) -> tuple[dict, dict]:
        return dict(self._buf), dict(self.rw.writes)

    def rollback_to(self, sp: tuple[dict, dict]) -> None:
        self._buf = dict(sp[0])
        self.rw.writes = dict(sp[1])

    def discard_writes(self) -> None:
        self._buf = {}
        self.rw.writes = {}
        self.fallback = {}

    def set_fallback(self) -> None:
        self.fallback = dict(self._buf)

    @property
    def writes(self) -> dict[tuple[str, bytes], Optional[Row]]:
        return self._buf

    def finish(self) -> RwSet:
        """Add implicit (e.g. Merkle node) writes to the write set and return it."""
        self.rw.writes.update(self.store.shadow_items(self._buf))
        return self.rw
