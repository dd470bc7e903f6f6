"""Active detection rounds and Merkle-guided repair of corrupt replicas.

A detection round appends an admin-signed ``CompareStates`` entry, collects
every replica's digests at that exact slot and groups replicas by them.
Repair pauses the corrupt replica, rolls its store back to its own snapshot
at the mark, diffs its forests against a reference replica's snapshot,
copies only rows whose encodings differ, then replays the log from the mark
and rejoins.
"""

from __future__ import annotations

import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .crypto import KeyPair
from .logsvc import CompareStates, KeyUpdate, LogBackend, SaveSyncState
from .merkle import SnapshotNodeReader, diff
from .replica import RecoverySession, Replica, TableDigest, UnknownSnapshot
from .store import ConstraintViolation, Row, Snapshot

log = logging.getLogger(__name__)


class RecoveryError(RuntimeError):
    pass


class Admin:
    """Holder of the administrator key; appends signed control entries."""

    def __init__(self, keypair: KeyPair, log_backend: LogBackend) -> None:
        self.keypair = keypair
        self.log = log_backend
        self._rounds = itertools.count(1)

    def compare_states(self) -> int:
        entry = CompareStates(next(self._rounds))
        return self.log.append(CompareStates(entry.round_id, self.keypair.sign(entry.signed_bytes())))

    def save_sync_state(self, reference_ids: Iterable[int]) -> int:
        entry = SaveSyncState(next(self._rounds), tuple(sorted(reference_ids)))
        return self.log.append(
            SaveSyncState(entry.round_id, entry.reference_ids, self.keypair.sign(entry.signed_bytes()))
        )

    def key_update(self, client_id: str, public_key: bytes, permissions: Iterable[str]) -> int:
        entry = KeyUpdate(client_id, public_key, tuple(permissions))
        return self.log.append(
            KeyUpdate(client_id, public_key, entry.permissions, self.keypair.sign(entry.signed_bytes()))
        )


@dataclass
class DetectionRound:
    mark: int
    states: dict[int, tuple] = field(default_factory=dict)
    missing: set[int] = field(default_factory=set)
    n: int = 0
    elapsed: float = 0.0

    @property
    def groups(self) -> list[list[int]]:
        """Replica groups by state, largest first, ties by lowest member id."""
        by_state: dict[tuple, list[int]] = {}
        for rid, state in sorted(self.states.items()):
            by_state.setdefault(state, []).append(rid)
        return sorted(by_state.values(), key=lambda g: (-len(g), g[0]))

    @property
    def majority(self) -> Optional[list[int]]:
        groups = self.groups
        if groups and len(groups[0]) > self.n // 2:
            return groups[0]
        return None

    @property
    def rest(self) -> list[int]:
        maj = set(self.majority or ())
        return sorted(r for r in self.states if r not in maj)

    @property
    def group_sizes(self) -> list[int]:
        return [len(g) for g in self.groups]


@dataclass
class RepairPlan:
    corrupt: int
    reference: int
    mark: int
    fallbacks: list[int] = field(default_factory=list)
    diff_leaves: dict[str, set[int]] = field(default_factory=dict)
    rows_to_copy: set[tuple[str, bytes]] = field(default_factory=set)


@dataclass
class RepairReport:
    corrupt: int
    reference: int
    mark: int
    diff_leaves: dict[str, int] = field(default_factory=dict)
    full_copy_tables: list[str] = field(default_factory=list)
    rows_copied: int = 0
    rows_inserted: int = 0
    rows_deleted: int = 0
    rows_examined: int = 0
    bytes_transferred: int = 0
    nodes_fetched: int = 0
    copied_keys: set[tuple[str, bytes]] = field(default_factory=set, repr=False)
    diff_seconds: float = 0.0
    copy_seconds: float = 0.0
    replay_seconds: float = 0.0
    replayed_through: int = 0
    digest_ok: bool = False

    @property
    def leaves_repaired(self) -> int:
        return sum(self.diff_leaves.values())

    def as_record(self) -> dict:
        return {
            "mark": self.mark,
            "corrupt": self.corrupt,
            "reference": self.reference,
            "diff_leaves": dict(self.diff_leaves),
            "full_copy_tables": list(self.full_copy_tables),
            "rows_copied": self.rows_copied,
            "rows_inserted": self.rows_inserted,
            "rows_deleted": self.rows_deleted,
            "bytes_transferred": self.bytes_transferred,
            "nodes_fetched": self.nodes_fetched,
            "diff_s": round(self.diff_seconds, 6),
            "copy_s": round(self.copy_seconds, 6),
            "replay_s": round(self.replay_seconds, 6),
            "replayed_through": self.replayed_through,
            "digest_ok": self.digest_ok,
        }


def _row_bytes(row: Optional[Row]) -> Optional[bytes]:
    return None if row is None else row.encode()


class RecoveryManager:
    def __init__(
        self,
        replicas: Mapping[int, Replica],
        admin: Admin,
        full_copy_fraction: float = 0.25,
        timeout: float = 30.0,
    ) -> None:
        self.replicas = dict(replicas)
        self.admin = admin
        self.full_copy_fraction = full_copy_fraction
        self.timeout = timeout
        self.reports: list[RepairReport] = []

    # -- detection ---------------------------------------------------------

    def run_detection_round(self, timeout: Optional[float] = None) -> DetectionRound:
        t0 = time.perf_counter()
        mark = self.admin.compare_states()
        rnd = DetectionRound(mark, n=len(self.replicas))
        deadline = t0 + (self.timeout if timeout is None else timeout)
        for rid, replica in sorted(self.replicas.items()):
            saved = replica.wait_saved(mark, max(0.0, deadline - time.perf_counter()))
            if saved is None:
                rnd.missing.add(rid)
            else:
                rnd.states[rid] = saved.state
        rnd.elapsed = time.perf_counter() - t0
        log.info("detection round at %d: groups %s missing %s", mark, rnd.groups, sorted(rnd.missing))
        return rnd

    def regroup(self, rnd: DetectionRound, timeout: Optional[float] = None) -> DetectionRound:
        """Fold in digests of replicas that were late for the round."""
        for rid in sorted(rnd.missing):
            saved = self.replicas[rid].wait_saved(rnd.mark, timeout)
            if saved is not None:
                rnd.states[rid] = saved.state
                rnd.missing.discard(rid)
        return rnd

    def handle_round(self, rnd: DetectionRound) -> list[RepairReport]:
        """Repair whatever the round found: minority repair or the divergent-set path."""
        groups = rnd.groups
        if len(groups) <= 1:
            return []
        majority = rnd.majority
        if majority is None:
            log.warning("no majority at %d; escalating to saveSyncState", rnd.mark)
            return self.recover_divergent_set(groups)
        plans = [RepairPlan(r, majority[0], rnd.mark, fallbacks=majority[1:]) for r in rnd.rest]
        return self.recover_many(plans)

    # -- repair ------------------------------------------------------------

    def _session(self, plan: RepairPlan) -> tuple[int, RecoverySession]:
        for rid in [plan.reference, *plan.fallbacks]:
            try:
                return rid, self.replicas[rid].serve_recovery_session(plan.mark)
            except UnknownSnapshot:
                log.warning("reference %d has no snapshot at %d", rid, plan.mark)
        raise RecoveryError(f"no reference snapshot at {plan.mark}")

    def recover_many(self, plans: Sequence[RepairPlan], resume: bool = True) -> list[RepairReport]:
        """Repair several replicas concurrently from read-only reference sessions."""
        reports: dict[int, RepairReport] = {}
        errors: list[BaseException] = []

        def run(plan: RepairPlan) -> None:
            try:
                reports[plan.corrupt] = self.recover_replica(plan, resume=resume)
            except BaseException as exc:  # surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=run, args=(p,), name=f"repair-{p.corrupt}") for p in plans]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return [reports[p.corrupt] for p in plans]

    def recover_replica(self, plan: RepairPlan, resume: bool = True) -> RepairReport:
        target = self.replicas[plan.corrupt]
        target.pause()
        target.access_restricted = True
        own = target.saved.get(plan.mark)
        if own is None:
            raise RecoveryError(f"replica {plan.corrupt} has no snapshot at {plan.mark}")
        own.ready.wait(self.timeout)
        store = target.store
        store.revert_to(own.snapshot)
        ref_id, session = self._session(plan)
        report = RepairReport(plan.corrupt, ref_id, plan.mark)

        store.constraints.disable()
        self._repair_rows(target, session, plan, report, local_digests=own.digests)
        try:
            store.constraints.enable(store)
        except ConstraintViolation:
            log.error("constraints fail after row repair of %d; copying full snapshot", plan.corrupt)
            self._repair_rows(target, session, plan, report, force_full=True)
            store.constraints.enable(store)

        now = store.take_snapshot()
        report.digest_ok = all(
            forest.table_digest(now) == session.replica.forests[t].table_digest(session.snapshot)
            for t, forest in target.forests.items()
        )
        report.bytes_transferred = session.bytes_transferred
        report.nodes_fetched = session.nodes_fetched
        if not report.digest_ok:
            raise RecoveryError(f"replica {plan.corrupt} digest differs from reference after repair")
        if resume:
            t0 = time.perf_counter()
            target.resume(replay=True)
            report.replayed_through = target.replay_until
            target.wait_for_index(target.replay_until, self.timeout)
            report.replay_seconds = time.perf_counter() - t0
        self.reports.append(report)
        log.info("repaired replica %d: %s", plan.corrupt, report.as_record())
        return report

    def _repair_rows(
        self,
        target: Replica,
        session: RecoverySession,
        plan: RepairPlan,
        report: RepairReport,
        force_full: bool = False,
        local_digests: Optional[Mapping[str, TableDigest]] = None,
    ) -> None:
        store = target.store
        local_snap = store.take_snapshot()
        writes: dict[tuple[str, bytes], Optional[Row]] = {}
        t0 = time.perf_counter()
        keysets: dict[str, Optional[set[bytes]]] = {}
        remote_digests = session.saved.digests
        for table, forest in sorted(target.forests.items()):
            mine, theirs = (local_digests or {}).get(table), remote_digests.get(table)
            if not force_full and mine is not None and theirs is not None and mine.digest == theirs.digest:
                # equal table digests: no need to descend into this forest
                plan.diff_leaves[table] = set()
                report.diff_leaves[table] = 0
                continue
            local = SnapshotNodeReader(forest, local_snap)
            leaves = diff(local, session.node_reader(table))
            plan.diff_leaves[table] = leaves
            report.diff_leaves[table] = len(leaves)
            if force_full or len(leaves) > self.full_copy_fraction * forest.config.total_leaves:
                report.full_copy_tables.append(table)
                keysets[table] = None
                continue
            keys: set[bytes] = set()
            for leaf in leaves:
                keys.update(forest.leaf_keys(local_snap, leaf))
                keys.update(session.leaf_keys(table, leaf))
            keysets[table] = keys
        report.diff_seconds += time.perf_counter() - t0

        t0 = time.perf_counter()
        for table, keys in keysets.items():
            if keys is None:
                theirs = {r.key: r for r in session.rows(table)}
                mine = {r.key: r for r in store.rows_at(local_snap, table)}
                keys = set(theirs) | set(mine)
            else:
                theirs = session.fetch_rows(table, sorted(keys))
                mine = {k: store.read_at(local_snap, table, k) for k in keys}
            for key in sorted(keys):
                a, b = mine.get(key), theirs.get(key)
                report.rows_examined += 1
                if _row_bytes(a) == _row_bytes(b):
                    continue
                writes[(table, key)] = b
                plan.rows_to_copy.add((table, key))
                report.copied_keys.add((table, key))
                if b is None:
                    report.rows_deleted += 1
                elif a is None:
                    report.rows_inserted += 1
                else:
                    report.rows_copied += 1
        if writes:
            store.apply_maintenance(writes, run_hooks=True)
        report.copy_seconds += time.perf_counter() - t0

    # -- nondeterminism recovery -------------------------------------------

    @staticmethod
    def choose_reference(groups: Sequence[Iterable[int]]) -> list[int]:
        """Members of the largest group; ties go to the group holding the lowest id."""
        norm = sorted((sorted(g) for g in groups if g), key=lambda g: (-len(g), g[0]))
        if not norm:
            raise RecoveryError("no replicas to choose from")
        return norm[0]

    def recover_divergent_set(
        self, groups: Sequence[Iterable[int]], reference: Optional[Iterable[int]] = None
    ) -> list[RepairReport]:
        refs = sorted(reference) if reference is not None else self.choose_reference(groups)
        if len(refs) == 1 and reference is None and all(len(list(g)) == 1 for g in groups):
            log.warning("no two replicas agree; using replica %d as the reference", refs[0])
        mark = self.admin.save_sync_state(refs)
        diverged = sorted(r for r in self.replicas if r not in refs)
        for rid in diverged:
            if not self.replicas[rid].wait_paused(self.timeout):
                raise RecoveryError(f"replica {rid} did not pause at {mark}")
        for rid in refs:
            if self.replicas[rid].wait_saved(mark, self.timeout) is None:
                raise RecoveryError(f"reference {rid} did not save a snapshot at {mark}")
        plans = [RepairPlan(r, refs[0], mark, fallbacks=refs[1:]) for r in diverged]
        return self.recover_many(plans)

    # -- code-compromise remediation ---------------------------------------

    def recompute_and_restart(self, replica_id: int) -> None:
        """Rebuild a replica's forests from its rows, then rejoin."""
        target = self.replicas[replica_id]
        target.pause()
        target.recompute_forests()
        target.resume(replay=False)


def states_agree(replicas: Iterable[Replica], snap_of=None) -> bool:
    """Do all replicas currently report the same digests?"""
    states = set()
    for r in replicas:
        snap: Snapshot = snap_of(r) if snap_of else r.store.take_snapshot()
        states.add(tuple((t, d.digest) for t, d in sorted(r.digests(snap).items())))
    return len(states) <= 1
