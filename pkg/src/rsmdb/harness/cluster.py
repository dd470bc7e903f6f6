"""An N-replica in-process cluster sharing one log and one bus."""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from ..bus import Bus
from ..clientagg import Aggregator, Client
from ..crypto import KeyPair, SignatureScheme, get_scheme
from ..logsvc import InProcessLog, LogBackend, SignedRequest
from ..merkle import ForestConfig
from ..procedures import USERTABLE, default_registry
from ..recovery import Admin, RecoveryManager
from ..replica import Replica, state_key
from ..store import Row
from .workload import WorkloadSpec, initial_rows, operations, ycsb_key

log = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    replicas: int = 4
    workers: int = 1
    max_set_size: Optional[int] = None
    partitions: int = 200
    fanout: int = 16
    levels: int = 1
    signature: str = "ed25519"  # ed25519 | rsa | null
    merkle: bool = True
    statement_latency: float = 0.0
    mode: str = "state"  # state | result
    clients: int = 64
    leader: int = 0
    full_copy_fraction: float = 0.25
    timeout: float = 60.0
    seed: int = 1
    # how many replicas (the highest ids) draw their own nondeterministic
    # values; the rest share one stream and therefore agree
    nondet_replicas: int = 1

    @property
    def forest(self) -> ForestConfig:
        return ForestConfig(self.partitions, self.fanout, self.levels)


def _keypair(scheme: SignatureScheme, seed: str) -> KeyPair:
    from_seed = getattr(scheme, "from_seed", None)
    return from_seed(seed.encode()) if from_seed else scheme.generate()


def client_name(i: int) -> str:
    return f"client{i:04d}"


class Cluster:
    def __init__(self, cfg: ClusterConfig, workload: WorkloadSpec, log_backend: Optional[LogBackend] = None) -> None:
        self.cfg = cfg
        self.workload = workload
        self.scheme = get_scheme(cfg.signature)
        self.log = log_backend or InProcessLog()
        self.bus = Bus()
        self.admin_keys = _keypair(self.scheme, f"admin-{cfg.seed}")
        self.admin = Admin(self.admin_keys, self.log)
        procs = default_registry()
        self.permissions = tuple(procs.names())
        self.clients = [
            Client(client_name(i), _keypair(self.scheme, f"client-{cfg.seed}-{i}"), self.log)
            for i in range(cfg.clients)
        ]
        self.rows = initial_rows(workload)
        self.replicas: dict[int, Replica] = {}
        for rid in range(cfg.replicas):
            self.replicas[rid] = self._make_replica(rid)
        self.aggregator = Aggregator(
            {rid: r.keypair.public for rid, r in self.replicas.items()},
            self.scheme,
            mode=cfg.mode,
            fetch_full=lambda rid, idx: self.replicas[rid].fetch_full_result(idx),
        )
        self.aggregator.attach(self.bus)
        self.recovery = RecoveryManager(
            self.replicas, self.admin, full_copy_fraction=cfg.full_copy_fraction, timeout=cfg.timeout
        )
        self._rr = 0

    def _make_replica(self, rid: int) -> Replica:
        cfg = self.cfg
        replica = Replica(
            rid,
            self.log,
            self.bus,
            schemas=[self.workload.schema()],
            forest_configs={USERTABLE: cfg.forest},
            admin_public=self.admin_keys.public,
            scheme=self.scheme,
            keypair=_keypair(self.scheme, f"replica-{cfg.seed}-{rid}"),
            workers=cfg.workers,
            max_set_size=cfg.max_set_size,
            merkle=cfg.merkle,
            statement_latency=cfg.statement_latency,
            leader_id=cfg.leader,
            nondet_salt=f"own-{rid}".encode() if rid >= cfg.replicas - cfg.nondet_replicas else b"shared",
        )
        replica.bootstrap(
            {USERTABLE: self.rows},
            {c.client_id: (c.keypair.public, self.permissions) for c in self.clients},
        )
        return replica

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        for r in self.replicas.values():
            r.start()

    def stop(self) -> None:
        for r in self.replicas.values():
            r.stop()

    def close(self) -> None:
        self.stop()
        self.bus.results.drain(5.0)
        self.bus.close()

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- driving -----------------------------------------------------------

    def next_client(self) -> Client:
        c = self.clients[self._rr % len(self.clients)]
        self._rr += 1
        return c

    def submit(self, procedure: str, *args: bytes, client: Optional[Client] = None) -> int:
        return (client or self.next_client()).sign_and_submit(procedure, *args)

    def submit_many(self, ops: Iterable[tuple[str, Sequence[bytes]]]) -> list[int]:
        return [self.submit(p, *a) for p, a in ops]

    def submit_workload(self) -> list[int]:
        return self.submit_many(operations(self.workload))

    def wait_all(self, index: Optional[int] = None, timeout: Optional[float] = None, replicas=None) -> bool:
        index = self.log.current_offset() if index is None else index
        deadline = time.monotonic() + (self.cfg.timeout if timeout is None else timeout)
        for rid in sorted(replicas if replicas is not None else self.replicas):
            r = self.replicas[rid]
            while not r.wait_for_index(index, 0.2):
                if r.worker_error is not None:
                    raise RuntimeError(f"replica {rid} worker failed") from r.worker_error
                if time.monotonic() > deadline:
                    return False
        return True

    def settle(self, timeout: float = 10.0) -> None:
        """Let queued envelopes reach the aggregator."""
        self.bus.results.drain(timeout)
        self.bus.alerts.drain(timeout)

    # -- state -------------------------------------------------------------

    def states(self) -> dict[int, tuple]:
        return {rid: state_key(r.current_digests()) for rid, r in self.replicas.items()}

    def states_equal(self) -> bool:
        return len(set(self.states().values())) == 1

    def forests_consistent(self) -> dict[int, bool]:
        """Incremental forest equals a from-rows recompute, per replica."""
        out = {}
        for rid, r in self.replicas.items():
            snap = r.store.take_snapshot()
            out[rid] = all(f.all_nodes(snap) == f.recompute_full(snap) for f in r.forests.values())
        return out

    # -- faults ------------------------------------------------------------

    def inject_corruption(
        self,
        replica_id: int,
        rows: int,
        leaves: int,
        mode: str = "tm1",
        kind: str = "update",
        table: str = USERTABLE,
        seed: int = 0,
    ) -> list[bytes]:
        return inject_corruption(self.replicas[replica_id], table, rows, leaves, mode, kind, seed)

    def inject_nondeterministic_tx(self, key: Optional[bytes] = None, field: str = "field0") -> int:
        # the coldest key, so later workload writes rarely mask the divergence
        return self.submit("nondet_write", key or ycsb_key(self.workload.rows - 1), field.encode())

    def replay_request(self, request: SignedRequest) -> int:
        return self.log.append(request)


def corruption_targets(replica, table: str, rows: int, leaves: int, seed: int = 0) -> list[bytes]:
    """Pick ``rows`` keys spread evenly over ``leaves`` distinct leaves."""
    if leaves < 1 or rows < leaves:
        raise ValueError("need 1 <= leaves <= rows")
    forest = replica.forests.get(table)
    if forest is None:
        raise ValueError(f"{table} has no forest")
    if leaves > forest.config.total_leaves:
        raise ValueError("more leaves requested than the forest has")
    per_leaf = [rows // leaves + (1 if i < rows % leaves else 0) for i in range(leaves)]
    snap = replica.store.take_snapshot()
    by_leaf: dict[int, list[bytes]] = {}
    for row in replica.store.rows_at(snap, table):
        by_leaf.setdefault(forest.path(row.key)[0], []).append(row.key)
    candidates = sorted(g for g, ks in by_leaf.items() if len(ks) >= per_leaf[0])
    if len(candidates) < leaves:
        raise ValueError(f"only {len(candidates)} leaves hold {per_leaf[0]} rows; {leaves} needed")
    rng = random.Random(seed)
    chosen = rng.sample(candidates, leaves)
    keys = []
    for gid, n in zip(chosen, per_leaf):
        keys.extend(rng.sample(sorted(by_leaf[gid]), n))
    return keys


def inject_corruption(
    replica,
    table: str,
    rows: int,
    leaves: int,
    mode: str = "tm1",
    kind: str = "update",
    seed: int = 0,
) -> list[bytes]:
    """Mutate rows of ``replica`` (anything with ``store`` and ``forests``) behind the log's back.

    ``tm1`` keeps the replica's forest in step with the tampered rows;
    ``tm2`` changes rows only, as a compromised system would.
    """
    if mode not in ("tm1", "tm2"):
        raise ValueError("mode must be tm1 or tm2")
    keys = corruption_targets(replica, table, rows, leaves, seed)
    rng = random.Random(seed + 1)
    store = replica.store
    with store.commit_lock:  # no torn rows against concurrent commits
        writes: dict[tuple[str, bytes], Optional[Row]] = {}
        for key in keys:
            old = store.latest(table, key)
            if kind == "delete":
                writes[(table, key)] = None
            else:
                name, value = old.fields[rng.randrange(len(old.fields))]
                fresh = bytes(b ^ 0xFF for b in value) if value else b"x"
                writes[(table, key)] = old.replace(**{name: fresh})
        store.apply_maintenance(writes, run_hooks=mode == "tm1")
    log.info("corrupted %d rows of %s (%s, %s)", len(keys), getattr(replica, "replica_id", "image"), mode, kind)
    return keys

