"""Application-server wrapper around one store + executor + Merkle stack.

A replica consumes the shared log with a pool of executor workers. User
requests are authenticated, authorised and replay-checked inside the
replicated transaction itself, so every healthy replica reaches the same
verdict. Every committed entry yields a signed ``ResultEnvelope`` on the
results topic. ``compareStates`` and ``saveSyncState`` entries save a
snapshot at their exact commit slot.
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

from . import encoding, hashing
from .bus import Bus
from .crypto import KeyPair, SignatureScheme
from .detexec import DeterministicExecutor, TxOutcome, WorkerPool
from .logsvc import CompareStates, KeyUpdate, LogBackend, LogEntry, SaveSyncState, SignedRequest
from .merkle import ForestConfig, MerkleForest, SnapshotNodeReader, table_digest
from .procedures import ProcedureRegistry, ReplicaEnv, default_registry
from .store import Row, Snapshot, Store, TableSchema, Transaction, TxAbort

log = logging.getLogger(__name__)

CLIENTS = "__clients__"
CLIENT_SCHEMA = TableSchema(CLIENTS, ("pubkey", "seq", "perms"))
# many small trees: every request bumps its client's seq row, so few
# partitions would make unrelated requests collide at a shared root
CLIENT_FOREST = ForestConfig(partitions=4096, fanout=2, levels=1)

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class UnknownSnapshot(KeyError):
    pass


@dataclass(frozen=True)
class ResultEnvelope:
    replica_id: int
    log_index: int
    status: str  # ok | failed | rejected
    result_hash: bytes
    partition_roots: tuple[tuple[str, int, bytes], ...]
    signature: bytes = b""
    full_result: Any = field(default=None, compare=False)
    replayed: bool = False
    kind: str = "user"

    def signed_region(self) -> bytes:
        parts = [
            _U32.pack(self.replica_id),
            _U64.pack(self.log_index),
            _U32.pack(len(self.status)),
            self.status.encode(),
            self.result_hash,
            _U32.pack(len(self.partition_roots)),
        ]
        for table, partition, root in sorted(self.partition_roots):
            tb = table.encode()
            parts += (_U32.pack(len(tb)), tb, _U32.pack(partition), root)
        return b"".join(parts)

    def vote_key(self, with_state: bool = True) -> tuple:
        if with_state:
            return (self.result_hash, tuple(sorted(self.partition_roots)))
        return (self.result_hash, ())


def result_hash(status: str, payload: Any) -> bytes:
    return hashing.digest(encoding.encode((status, payload)))


@dataclass(frozen=True)
class TableDigest:
    table: str
    config: ForestConfig
    roots: tuple[bytes, ...]

    @property
    def digest(self) -> bytes:
        return table_digest(self.roots)


def state_key(digests: Mapping[str, TableDigest]) -> tuple[tuple[str, bytes], ...]:
    """Single comparison value for a replica's state: sorted table digests."""
    return tuple((t, d.digest) for t, d in sorted(digests.items()))


@dataclass
class SavedSnapshot:
    mark: int
    snapshot: Snapshot
    kind: str  # compare | sync
    role: str = "reference"  # for sync: reference | diverged
    digests: dict[str, TableDigest] = field(default_factory=dict)
    ready: threading.Event = field(default_factory=threading.Event, repr=False)

    @property
    def state(self) -> tuple:
        return state_key(self.digests)


class RecoverySession:
    """Read-only accessors pinned to one saved snapshot of a replica."""

    def __init__(self, replica: "Replica", saved: SavedSnapshot) -> None:
        self.replica = replica
        self.saved = saved
        self.snapshot = saved.snapshot
        self.rows_fetched = 0
        self.bytes_transferred = 0
        self._readers: dict[str, SnapshotNodeReader] = {}

    def node_reader(self, table: str) -> SnapshotNodeReader:
        reader = self._readers.get(table)
        if reader is None:
            reader = self._readers[table] = SnapshotNodeReader(self.replica.forests[table], self.snapshot)
        return reader

    @property
    def nodes_fetched(self) -> int:
        return sum(r.fetched for r in self._readers.values())

    def leaf_keys(self, table: str, leaf_gid: int) -> list[bytes]:
        keys = self.replica.forests[table].leaf_keys(self.snapshot, leaf_gid)
        self.bytes_transferred += sum(len(k) for k in keys)
        return keys

    def fetch_rows(self, table: str, keys: Iterable[bytes]) -> dict[bytes, Optional[Row]]:
        store = self.replica.store
        out = {}
        for k in keys:
            row = store.read_at(self.snapshot, table, k)
            out[k] = row
            self.rows_fetched += 1
            if row is not None:
                self.bytes_transferred += len(row.encode())
        return out

    def rows(self, table: str) -> list[Row]:
        rows = self.replica.store.rows_at(self.snapshot, table)
        self.rows_fetched += len(rows)
        self.bytes_transferred += sum(len(r.encode()) for r in rows)
        return rows


class Replica:
    def __init__(
        self,
        replica_id: int,
        log: LogBackend,
        bus: Bus,
        *,
        schemas: Iterable[TableSchema],
        forest_configs: Mapping[str, ForestConfig],
        admin_public: bytes,
        scheme: SignatureScheme,
        keypair: Optional[KeyPair] = None,
        procedures: Optional[ProcedureRegistry] = None,
        workers: int = 1,
        max_set_size: Optional[int] = None,
        wait_timeout: float = 0.001,
        merkle: bool = True,
        statement_latency: float = 0.0,
        leader_id: int = 0,
        nondet_salt: Optional[bytes] = None,
        client_forest: ForestConfig = CLIENT_FOREST,
        retain_snapshots: int = 2,
    ) -> None:
        self.replica_id = replica_id
        self.log = log
        self.bus = bus
        self.scheme = scheme
        self.keypair = keypair or scheme.generate()
        self.admin_public = admin_public
        self.procedures = procedures or default_registry()
        self.leader_id = leader_id
        self.retain_snapshots = retain_snapshots
        self.store = Store()
        self.store.create_table(CLIENT_SCHEMA)
        for schema in schemas:
            self.store.create_table(schema)
        self.forests: dict[str, MerkleForest] = {}
        if merkle:
            for table, cfg in forest_configs.items():
                self.forests[table] = MerkleForest(self.store, table, cfg)
            self.forests[CLIENTS] = MerkleForest(self.store, CLIENTS, client_forest)
        salt = nondet_salt if nondet_salt is not None else str(replica_id).encode()
        self.env = ReplicaEnv(replica_id, salt)
        self.executor = DeterministicExecutor(
            self.store,
            workers=workers,
            max_set_size=max_set_size,
            wait_timeout=wait_timeout,
            statement_latency=statement_latency,
            env=self.env,
        )
        self.saved: dict[int, SavedSnapshot] = {}
        self._saved_cv = threading.Condition()
        self._pool: Optional[WorkerPool] = None
        self.paused_at: Optional[int] = None
        self._pause_cv = threading.Condition()
        self.replay_until = 0
        self.access_restricted = False
        self.results: dict[int, tuple[str, Any]] = {}
        self._verify_cache: dict[tuple[bytes, bytes, bytes], bool] = {}
        self.envelopes_published = 0

    # -- lifecycle ---------------------------------------------------------

    def bootstrap(self, rows: Mapping[str, Iterable[Row]], clients: Mapping[str, tuple[bytes, Iterable[str]]]) -> None:
        """Install the identical initial state every replica starts from."""
        writes: dict[tuple[str, bytes], Optional[Row]] = {}
        for table, table_rows in rows.items():
            for row in table_rows:
                writes[(table, row.key)] = row
        for cid, (pub, perms) in clients.items():
            writes[(CLIENTS, cid.encode())] = _client_row(cid, pub, "0", perms)
        self.store.apply_maintenance(writes)

    @property
    def frontier(self) -> int:
        return self.executor.last_committed_tx_id

    @property
    def running(self) -> bool:
        return self._pool is not None and self._pool.alive

    def start(self) -> None:
        if self._pool is not None:
            self._pool.stop()
        self.executor.reset()
        with self._pause_cv:
            self.paused_at = None
            self._pause_cv.notify_all()
        self._pool = WorkerPool(
            self.executor, self._source, self._sink, name=f"replica{self.replica_id}"
        )
        self._pool.start(self.store.last_tx_id + 1)

    def pause(self) -> int:
        """Stop consuming the log; returns the commit frontier."""
        if self._pool is not None:
            self._pool.stop()
            self._pool = None
        with self._pause_cv:
            if self.paused_at is None:
                self.paused_at = self.frontier
            self._pause_cv.notify_all()
        return self.frontier

    def wait_paused(self, timeout: Optional[float] = None) -> bool:
        with self._pause_cv:
            if not self._pause_cv.wait_for(lambda: self.paused_at is not None, timeout):
                return False
        if self._pool is not None:
            self._pool.join(timeout)
            if self._pool.alive:
                return False
            self._pool = None
        return True

    def resume(self, replay: bool = True) -> None:
        """Restart consumption right after the local frontier."""
        if replay:
            self.replay_until = self.log.current_offset()
        self.access_restricted = False
        self.start()

    def stop(self) -> None:
        self.pause()

    def wait_for_index(self, index: int, timeout: Optional[float] = None) -> bool:
        cv = self.executor._cv
        with cv:
            return cv.wait_for(lambda: self.executor.last_committed_tx_id >= index, timeout)

    @property
    def worker_error(self) -> Optional[BaseException]:
        return self._pool.error if self._pool is not None else None

    # -- log consumption ---------------------------------------------------

    def _source(self, k: int):
        ex = self.executor
        while not ex.stopping:
            entry = self.log.get(k, timeout=0.05)
            if entry is not None:
                return self.task_for(entry)
        return None

    def task_for(self, entry: LogEntry):
        """(body, on_commit) executing ``entry`` at its log slot."""
        p = entry.payload
        if isinstance(p, SignedRequest):
            return self._user_body(p), None
        if isinstance(p, KeyUpdate):
            return self._key_update_body(p), None
        if isinstance(p, CompareStates):
            return self._admin_body(p), self._on_compare_commit
        if isinstance(p, SaveSyncState):
            return self._admin_body(p), self._on_sync_commit(p)
        raise TypeError(f"unknown payload {type(p).__name__}")

    def process_entry(self, entry: LogEntry) -> ResultEnvelope:
        """Execute one entry synchronously at its slot (caller orders calls)."""
        body, on_commit = self.task_for(entry)
        outcome = self.executor.run_tx(entry.index, body, on_commit)
        return self._sink(entry.index, outcome)

    def _verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        key = (public, message, signature)
        ok = self._verify_cache.get(key)
        if ok is None:
            ok = self.scheme.verify(public, message, signature)
            if len(self._verify_cache) > 200_000:
                self._verify_cache.clear()
            self._verify_cache[key] = ok
        return ok

    def _user_body(self, req: SignedRequest):
        def body(tx: Transaction):
            ck = req.client_id.encode()
            crow = tx.read(CLIENTS, ck)
            if crow is None:
                return ("rejected", "unknown-client")
            if not self._verify(crow.get("pubkey"), req.signed_bytes(), req.signature):
                return ("rejected", "bad-signature")
            perms = crow.get("perms").decode().split(",")
            proc = self.procedures.get(req.procedure)
            if proc is None or req.procedure not in perms:
                return ("rejected", "unauthorized")
            last = int(crow.get("seq"))
            if req.seq <= last:
                return ("rejected", "replay")
            if req.seq != last + 1:
                return ("rejected", "seq-gap")
            tx.update(CLIENTS, ck, seq=str(req.seq).encode())
            tx.set_fallback()
            sp = tx.savepoint()
            try:
                return ("ok", proc(tx, *req.args))
            except TxAbort as exc:
                tx.rollback_to(sp)
                return ("failed", str(exc))
            except Exception as exc:  # deterministic procedure error
                tx.rollback_to(sp)
                return ("failed", f"{type(exc).__name__}: {exc}")

        return body

    def _key_update_body(self, upd: KeyUpdate):
        def body(tx: Transaction):
            if not self._verify(self.admin_public, upd.signed_bytes(), upd.admin_signature):
                return ("rejected", "bad-admin-signature")
            ck = upd.client_id.encode()
            old = tx.read(CLIENTS, ck)
            seq = old.get("seq").decode() if old is not None else "0"
            tx.put(CLIENTS, _client_row(upd.client_id, upd.public_key, seq, upd.permissions))
            return ("ok", 1)

        return body

    def _admin_body(self, payload):
        def body(tx: Transaction):
            if not self._verify(self.admin_public, payload.signed_bytes(), payload.admin_signature):
                return ("rejected", "bad-admin-signature")
            return ("ok", None)

        return body

    def _save(self, k: int, outcome: TxOutcome, kind: str, role: str = "reference") -> None:
        saved = SavedSnapshot(k, outcome.commit_snapshot, kind, role)
        with self._saved_cv:
            self.saved[k] = saved
            for old in sorted(self.saved)[: -self.retain_snapshots]:
                del self.saved[old]
            self._saved_cv.notify_all()
        outcome.extra["saved"] = saved

    def _on_compare_commit(self, k: int, outcome: TxOutcome) -> None:
        if outcome.result and outcome.result[0] == "ok":
            self._save(k, outcome, "compare")

    def _on_sync_commit(self, p: SaveSyncState):
        def on_commit(k: int, outcome: TxOutcome) -> None:
            if not (outcome.result and outcome.result[0] == "ok"):
                return
            if self.replica_id in p.reference_ids:
                self._save(k, outcome, "sync", "reference")
            else:
                self._save(k, outcome, "sync", "diverged")
                self.executor.request_stop_locked()
                self.access_restricted = True
                with self._pause_cv:
                    self.paused_at = k
                    self._pause_cv.notify_all()
                log.info("replica %d diverged at sync %d; pausing", self.replica_id, k)

        return on_commit

    # -- results -----------------------------------------------------------

    def digests(self, snap: Snapshot) -> dict[str, TableDigest]:
        return {
            t: TableDigest(t, f.config, tuple(f.partition_roots(snap))) for t, f in sorted(self.forests.items())
        }

    def _sink(self, k: int, outcome: TxOutcome) -> ResultEnvelope:
        if outcome.status == "ok":
            status, payload = outcome.result
        else:
            status, payload = "failed", outcome.reason
        saved: Optional[SavedSnapshot] = outcome.extra.get("saved")
        kind = "user"
        roots: tuple = ()
        if saved is not None:
            saved.digests = self.digests(saved.snapshot)
            saved.ready.set()
            kind = saved.kind
            payload = tuple((t, d.roots) for t, d in sorted(saved.digests.items()))
        elif outcome.writes:
            roots = self._updated_roots(outcome)
        self.results[k] = (status, payload)
        env = ResultEnvelope(
            replica_id=self.replica_id,
            log_index=k,
            status=status,
            result_hash=result_hash(status, payload),
            partition_roots=roots,
            full_result=(status, payload) if self.replica_id == self.leader_id else None,
            replayed=k <= self.replay_until,
            kind=kind,
        )
        env = _sign(env, self.keypair)
        self.envelopes_published += 1
        self.bus.results.publish(env)
        return env

    def _updated_roots(self, outcome: TxOutcome) -> tuple:
        touched: dict[tuple[str, int], None] = {}
        for table, key in outcome.writes:
            forest = self.forests.get(table)
            if forest is not None:
                touched[(table, forest.partition_of(key))] = None
        snap = outcome.commit_snapshot
        before = Snapshot(snap.csn - 1, snap.visible_through - 1)
        roots = []
        for t, p in touched:
            forest = self.forests[t]
            gid = forest.root_gid(p)
            root = forest.node_hash(snap, gid)
            if root != forest.node_hash(before, gid):
                roots.append((t, p, root))
        return tuple(sorted(roots))

    def fetch_full_result(self, index: int) -> Optional[tuple[str, Any]]:
        return self.results.get(index)

    # -- snapshots & recovery sessions ------------------------------------

    def wait_saved(self, mark: int, timeout: Optional[float] = None) -> Optional[SavedSnapshot]:
        with self._saved_cv:
            if not self._saved_cv.wait_for(lambda: mark in self.saved, timeout):
                return None
            saved = self.saved[mark]
        return saved if saved.ready.wait(timeout) else None

    def serve_recovery_session(self, mark: int) -> RecoverySession:
        saved = self.saved.get(mark)
        if saved is None:
            raise UnknownSnapshot(mark)
        saved.ready.wait()
        return RecoverySession(self, saved)

    def current_digests(self) -> dict[str, TableDigest]:
        return self.digests(self.store.take_snapshot())

    def recompute_forests(self) -> None:
        """Rebuild every forest from its rows at the current state."""
        snap = self.store.take_snapshot()
        for forest in self.forests.values():
            forest.install(forest.recompute_full(snap))


def _client_row(cid: str, pub: bytes, seq: str, perms: Iterable[str]) -> Row:
    return CLIENT_SCHEMA.row(cid.encode(), {"pubkey": pub, "seq": seq.encode(), "perms": ",".join(perms).encode()})


def _sign(env: ResultEnvelope, keypair: KeyPair) -> ResultEnvelope:
    return replace(env, signature=keypair.sign(env.signed_region()))
