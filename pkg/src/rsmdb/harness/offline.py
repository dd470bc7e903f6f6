"""Operations on canonical state dumps, used by the command line tools.

A dump holds user tables, the client key table and the stored Merkle node
tables. Loading keeps the stored nodes as they are, so a dump whose forest
disagrees with its rows (threat model 2) can be recognised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from ..merkle import ForestConfig, MerkleForest, SnapshotNodeReader, diff
from ..replica import CLIENT_FOREST, CLIENTS, state_key, TableDigest
from ..store import Row, Store

MERKLE_PREFIX = "__merkle__"


@dataclass
class StateImage:
    store: Store
    forests: dict[str, MerkleForest]

    @classmethod
    def load(cls, path: str, config: ForestConfig) -> "StateImage":
        with open(path) as fh:
            store = Store.load_dump(fh)
        forests = {}
        for name in store.table_names():
            if name.startswith(MERKLE_PREFIX):
                table = name[len(MERKLE_PREFIX) :]
                if not store.has_table(table):
                    continue
                cfg = CLIENT_FOREST if table == CLIENTS else config
                forests[table] = MerkleForest(store, table, cfg)
        image = cls(store, forests)
        image.rebuild_index()
        return image

    def rebuild_index(self) -> None:
        snap = self.store.take_snapshot()
        for forest in self.forests.values():
            forest.recompute_full(snap)  # refreshes the leaf index only

    def save(self, path: str) -> None:
        self.store.save_dump(path)

    def digests(self) -> dict[str, TableDigest]:
        snap = self.store.take_snapshot()
        return {t: TableDigest(t, f.config, tuple(f.partition_roots(snap))) for t, f in sorted(self.forests.items())}

    def state(self) -> tuple:
        return state_key(self.digests())

    def digest_lines(self) -> list[str]:
        snap = self.store.take_snapshot()
        return [f.export_digest(snap) for _, f in sorted(self.forests.items())]

    def inconsistent_tables(self) -> list[str]:
        """Tables whose stored forest differs from a recompute over the rows."""
        snap = self.store.take_snapshot()
        return [t for t, f in sorted(self.forests.items()) if f.all_nodes(snap) != f.recompute_full(snap)]


def repair_image(corrupt: StateImage, reference: StateImage) -> dict:
    """Copy into ``corrupt`` every row whose encoding differs in a mismatching leaf."""
    csnap = corrupt.store.take_snapshot()
    rsnap = reference.store.take_snapshot()
    writes: dict[tuple[str, bytes], Optional[Row]] = {}
    leaves_total = 0
    for table, forest in sorted(corrupt.forests.items()):
        ref_forest = reference.forests[table]
        leaves = diff(SnapshotNodeReader(forest, csnap), SnapshotNodeReader(ref_forest, rsnap))
        leaves_total += len(leaves)
        keys: set[bytes] = set()
        for leaf in leaves:
            keys.update(forest.leaf_keys(csnap, leaf))
            keys.update(ref_forest.leaf_keys(rsnap, leaf))
        for key in sorted(keys):
            mine = corrupt.store.read_at(csnap, table, key)
            theirs = reference.store.read_at(rsnap, table, key)
            if (mine and mine.encode()) != (theirs and theirs.encode()):
                writes[(table, key)] = theirs
    if writes:
        corrupt.store.apply_maintenance(writes, run_hooks=True)
    return {"diff_leaves": leaves_total, "rows_written": len(writes)}


def group_states(images: Iterable[tuple[str, StateImage]]) -> list[list[str]]:
    by_state: dict[tuple, list[str]] = {}
    for name, image in images:
        by_state.setdefault(image.state(), []).append(name)
    return sorted(by_state.values(), key=lambda g: (-len(g), g[0]))
