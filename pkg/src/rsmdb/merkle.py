"""Partitioned XOR-Merkle forests over store tables.

Each table gets ``P`` independent trees of fanout ``F`` and depth ``L``
(root at level 0, leaves at level ``L``). Nodes are numbered breadth-first
inside a partition (children of position ``p`` are ``F*p+1 .. F*p+F``) and
globally as ``partition * N + position``. Node hashes live as rows of a
system table ``__merkle__<table>`` so writers of the same partition collide
in the executor's conflict check.

A leaf is the XOR of the hashes of its rows; a parent is the XOR of its
children. Changing a row therefore changes every node on its path by the same
delta ``h(old) ^ h(new)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol, Sequence

from . import hashing
from .store import Row, Snapshot, Store, TableSchema

_NODE_KEY = struct.Struct(">Q")
NODE_SCHEMA_FIELDS = ("h",)
MAX_NODES = 2**63 - 1


class ConfigMismatch(Exception):
    pass


def node_count(fanout: int, levels: int) -> tuple[int, int]:
    """Leaves and total nodes of one partition tree."""
    if fanout < 2 or levels < 1:
        raise ValueError("need fanout >= 2 and levels >= 1")
    leaves = fanout**levels
    nodes = (fanout ** (levels + 1) - 1) // (fanout - 1)
    if nodes > MAX_NODES:
        raise OverflowError(f"{nodes} nodes exceed the 64-bit node id space")
    return leaves, nodes


@dataclass(frozen=True)
class ForestConfig:
    partitions: int = 200
    fanout: int = 16
    levels: int = 1

    def __post_init__(self) -> None:
        if self.partitions < 1:
            raise ValueError("need at least one partition")
        _, nodes = node_count(self.fanout, self.levels)
        if self.partitions * nodes > MAX_NODES:
            raise OverflowError("global node ids exceed 64 bits")

    @property
    def leaves_per_partition(self) -> int:
        return self.fanout**self.levels

    @property
    def nodes_per_partition(self) -> int:
        return node_count(self.fanout, self.levels)[1]

    @property
    def first_leaf_position(self) -> int:
        return (self.fanout**self.levels - 1) // (self.fanout - 1)

    @property
    def total_leaves(self) -> int:
        return self.partitions * self.leaves_per_partition

    @property
    def total_nodes(self) -> int:
        return self.partitions * self.nodes_per_partition

    def describe(self) -> str:
        return f"P={self.partitions} F={self.fanout} L={self.levels}"


class NodeId(NamedTuple):
    partition: int
    position: int

    def global_id(self, cfg: ForestConfig) -> int:
        return self.partition * cfg.nodes_per_partition + self.position

    @classmethod
    def from_global(cls, cfg: ForestConfig, gid: int) -> "NodeId":
        p, pos = divmod(gid, cfg.nodes_per_partition)
        return cls(p, pos)


def children(cfg: ForestConfig, position: int) -> range:
    base = cfg.fanout * position
    return range(base + 1, base + cfg.fanout + 1)


def parent(cfg: ForestConfig, position: int) -> int:
    return (position - 1) // cfg.fanout


def node_key(gid: int) -> bytes:
    return _NODE_KEY.pack(gid)


def merkle_table(table: str) -> str:
    return f"__merkle__{table}"


def leaf_slot(cfg: ForestConfig, key: bytes) -> tuple[int, int]:
    """(partition, leaf index within the partition) for a row key."""
    q = int.from_bytes(hashing.digest(b"leaf\x00" + key)[:8], "big") % cfg.total_leaves
    return divmod(q, cfg.leaves_per_partition)


def row_to_leaf(cfg: ForestConfig, key: bytes) -> NodeId:
    p, j = leaf_slot(cfg, key)
    return NodeId(p, cfg.first_leaf_position + j)


def table_digest(roots: Sequence[bytes]) -> bytes:
    return hashing.digest(b"".join(roots))


def format_digest(table: str, cfg: ForestConfig, roots: Sequence[bytes]) -> str:
    return " ".join([table, str(cfg.partitions), str(cfg.fanout), str(cfg.levels)] + [r.hex() for r in roots])


def parse_digest(line: str) -> tuple[str, ForestConfig, list[bytes]]:
    parts = line.split()
    table, p, f, l = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    roots = [bytes.fromhex(h) for h in parts[4:]]
    if len(roots) != p:
        raise ValueError(f"expected {p} roots, got {len(roots)}")
    return table, ForestConfig(p, f, l), roots


class MerkleForest:
    """Incrementally maintained forest for one table of one store."""

    def __init__(self, store: Store, table: str, config: ForestConfig) -> None:
        self.store = store
        self.table = table
        self.config = config
        self.mtable = merkle_table(table)
        self._nodes = config.nodes_per_partition
        self._paths: dict[bytes, tuple[int, ...]] = {}
        self._shadow_cache: dict[bytes, tuple[tuple[str, bytes], ...]] = {}
        # leaf gid -> every key ever mapped there; filtered by snapshot on lookup
        self.leaf_index: dict[int, set[bytes]] = {}
        if not store.has_table(self.mtable):
            store.create_table(TableSchema(self.mtable, NODE_SCHEMA_FIELDS), system=True)
        self.attach()

    def attach(self) -> None:
        self.store.remove_hooks(self.table)
        self.store.add_hook(self.table, self.apply_row_change)
        self.store.set_write_shadow(self.table, self.shadow)

    def detach(self) -> None:
        self.store.remove_hooks(self.table)
        self.store.clear_write_shadow(self.table)

    # -- geometry ----------------------------------------------------------

    def row_to_leaf(self, key: bytes) -> NodeId:
        return row_to_leaf(self.config, key)

    def path(self, key: bytes) -> tuple[int, ...]:
        """Global ids from the key's leaf up to its partition root."""
        path = self._paths.get(key)
        if path is None:
            cfg = self.config
            p, pos = row_to_leaf(cfg, key)
            base = p * self._nodes
            ids = [base + pos]
            while pos:
                pos = (pos - 1) // cfg.fanout
                ids.append(base + pos)
            path = self._paths[key] = tuple(ids)
        return path

    def shadow(self, key: bytes) -> tuple[tuple[str, bytes], ...]:
        items = self._shadow_cache.get(key)
        if items is None:
            items = self._shadow_cache[key] = tuple((self.mtable, node_key(g)) for g in self.path(key))
        return items

    def partition_of(self, key: bytes) -> int:
        return self.path(key)[-1] // self._nodes

    def root_gid(self, partition: int) -> int:
        return partition * self._nodes

    # -- maintenance -------------------------------------------------------

    def apply_row_change(self, key: bytes, old: Optional[Row], new: Optional[Row], csn: int) -> tuple[int, ...]:
        """XOR the row's hash delta into its leaf and every ancestor.

        Runs inside the store's commit section; returns the touched node ids.
        """
        delta = 0
        if old is not None:
            delta ^= int.from_bytes(old.hash(), "big")
        if new is not None:
            delta ^= int.from_bytes(new.hash(), "big")
            if old is None:
                self.leaf_index.setdefault(self.path(key)[0], set()).add(key)
        path = self.path(key)
        if delta:
            store = self.store
            mtable = self.mtable
            for gid in path:
                nk = node_key(gid)
                cur = store.latest(mtable, nk)
                value = int.from_bytes(cur.fields[0][1], "big") if cur is not None else 0
                store.put_version(mtable, nk, Row(nk, (("h", (value ^ delta).to_bytes(32, "big")),)), csn)
        return path

    # -- reads -------------------------------------------------------------

    def node_hash(self, snap: Snapshot, gid: int) -> bytes:
        row = self.store.read_at(snap, self.mtable, node_key(gid))
        return row.fields[0][1] if row is not None else hashing.ZERO_HASH

    def node_hashes(self, snap: Snapshot, gids: Sequence[int]) -> list[bytes]:
        return [self.node_hash(snap, g) for g in gids]

    def partition_roots(self, snap: Snapshot) -> list[bytes]:
        return self.node_hashes(snap, [self.root_gid(p) for p in range(self.config.partitions)])

    def table_digest(self, snap: Snapshot) -> bytes:
        return table_digest(self.partition_roots(snap))

    def export_digest(self, snap: Snapshot) -> str:
        return format_digest(self.table, self.config, self.partition_roots(snap))

    def all_nodes(self, snap: Snapshot) -> list[bytes]:
        return self.node_hashes(snap, range(self.config.total_nodes))

    def leaf_keys(self, snap: Snapshot, leaf_gid: int) -> list[bytes]:
        """Keys of rows visible at ``snap`` that map to the given leaf."""
        with self.store.commit_lock:  # the commit hook mutates leaf_index
            candidates = sorted(self.leaf_index.get(leaf_gid, ()))
        return [k for k in candidates if self.store.read_at(snap, self.table, k) is not None]

    # -- full recompute ----------------------------------------------------

    def recompute_full(self, snap: Snapshot) -> list[bytes]:
        """Rebuild every node from the rows visible at ``snap``.

        Independent of the incremental path: leaves are folded from row
        hashes, then each level is folded from its children bottom-up.
        """
        cfg = self.config
        n = self._nodes
        nodes = [0] * cfg.total_nodes
        index: dict[int, set[bytes]] = {}
        for row in self.store.rows_at(snap, self.table):
            p, j = leaf_slot(cfg, row.key)
            gid = p * n + cfg.first_leaf_position + j
            nodes[gid] ^= int.from_bytes(row.hash(), "big")
            index.setdefault(gid, set()).add(row.key)
        for p in range(cfg.partitions):
            base = p * n
            for pos in range(cfg.first_leaf_position - 1, -1, -1):
                acc = 0
                for c in children(cfg, pos):
                    acc ^= nodes[base + c]
                nodes[base + pos] = acc
        for gid, keys in index.items():
            self.leaf_index.setdefault(gid, set()).update(keys)
        return [v.to_bytes(32, "big") for v in nodes]

    def install(self, nodes: Sequence[bytes]) -> int:
        """Overwrite the stored forest with ``nodes`` (code-compromise remediation)."""
        if len(nodes) != self.config.total_nodes:
            raise ValueError("node vector has the wrong length")
        writes = {}
        for gid, h in enumerate(nodes):
            nk = node_key(gid)
            writes[(self.mtable, nk)] = Row(nk, (("h", h),))
        return self.store.apply_maintenance(writes, run_hooks=False)


class NodeReader(Protocol):
    config: ForestConfig

    def node_hashes(self, gids: Sequence[int]) -> list[bytes]: ...


class SnapshotNodeReader:
    """Reads node hashes of one forest pinned at a snapshot; counts fetches."""

    def __init__(self, forest: MerkleForest, snap: Snapshot) -> None:
        self.forest = forest
        self.snap = snap
        self.config = forest.config
        self.fetched = 0

    def node_hashes(self, gids: Sequence[int]) -> list[bytes]:
        self.fetched += len(gids)
        return self.forest.node_hashes(self.snap, gids)


def diff(local: NodeReader, remote: NodeReader) -> set[int]:
    """Global ids of leaves whose hashes differ, found by descending mismatches."""
    cfg = local.config
    if cfg != remote.config:
        raise ConfigMismatch(f"{cfg.describe()} vs {remote.config.describe()}")
    n = cfg.nodes_per_partition
    level = [p * n for p in range(cfg.partitions)]
    for depth in range(cfg.levels + 1):
        if not level:
            break
        mine = local.node_hashes(level)
        theirs = remote.node_hashes(level)
        mismatched = [g for g, a, b in zip(level, mine, theirs) if a != b]
        if depth == cfg.levels:
            return set(mismatched)
        level = []
        for g in mismatched:
            p, pos = divmod(g, n)
            level.extend(p * n + c for c in children(cfg, pos))
    return set()
