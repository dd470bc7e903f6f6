"""Deterministic concurrent execution in log order.

Workers execute transactions speculatively on snapshots, validate the
resulting read/write sets against every transaction that committed after the
snapshot, re-execute on conflict, and commit strictly in log order. The
committed read/write sets are kept in two alternating bounded tables so old
entries can be dropped wholesale.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .store import ConstraintViolation, RwSet, Snapshot, Store, Transaction, TxAbort

log = logging.getLogger(__name__)

# body(tx) -> result; raise TxAbort for a deterministic failure
TxBody = Callable[[Transaction], Any]
# on_commit(k, outcome) runs inside the commit section
CommitAction = Callable[[int, "TxOutcome"], None]


class Stopped(Exception):
    """The executor was asked to stop before this transaction committed."""


class InvariantBreach(RuntimeError):
    pass


def map_to_set(tx_id: int, max_set_size: int) -> int:
    return ((tx_id - 1) // max_set_size) % 2


class CommittedSets:
    """The two alternating tables of committed read/write sets."""

    def __init__(self, max_set_size: int) -> None:
        if max_set_size < 1:
            raise ValueError("max_set_size must be positive")
        self.max_set_size = max_set_size
        self.tables: list[dict[int, RwSet]] = [{}, {}]
        # which block of max_set_size consecutive ids each table holds
        self.blocks: list[Optional[int]] = [None, None]
        self.evictions = 0

    def insert(self, tx_id: int, rw: RwSet) -> None:
        block = (tx_id - 1) // self.max_set_size
        i = block % 2
        if self.blocks[i] != block:
            # Entering a new block means the ids two blocks back are no
            # longer needed. Rebinding keeps unlocked readers consistent.
            if self.tables[i]:
                self.evictions += 1
            self.tables[i] = {}
            self.blocks[i] = block
        self.tables[i][tx_id] = rw

    def get(self, tx_id: int) -> Optional[RwSet]:
        return self.tables[map_to_set(tx_id, self.max_set_size)].get(tx_id)

    def ids(self) -> list[int]:
        return sorted(list(self.tables[0]) + list(self.tables[1]))

    def clear(self) -> None:
        self.tables = [{}, {}]
        self.blocks = [None, None]


@dataclass
class TxOutcome:
    tx_id: int
    status: str  # "ok" | "failed"
    result: Any
    rwset: RwSet
    writes: dict
    attempts: int = 1
    reason: str = ""
    commit_snapshot: Optional[Snapshot] = None
    extra: dict = field(default_factory=dict)


@dataclass
class _Execution:
    status: str
    result: Any
    reason: str
    rw: RwSet
    writes: dict
    fallback: dict = field(default_factory=dict)


class DeterministicExecutor:
    def __init__(
        self,
        store: Store,
        workers: int = 1,
        max_set_size: Optional[int] = None,
        wait_timeout: float = 0.001,
        statement_latency: float = 0.0,
        env: Any = None,
    ) -> None:
        self.store = store
        self.workers = workers
        self.max_set_size = max_set_size or max(workers, 64)
        if self.max_set_size < workers:
            log.warning("max_set_size %d < workers %d: evictions may race", self.max_set_size, workers)
        self.wait_timeout = wait_timeout
        self.statement_latency = statement_latency
        self.env = env
        self.sets = CommittedSets(self.max_set_size)
        self._cv = threading.Condition(store.commit_lock)
        self._last = store.last_tx_id
        self._stopping = False
        self.commits = 0
        self.reexecutions = 0
        self.waits = 0

    # -- state -------------------------------------------------------------

    @property
    def last_committed_tx_id(self) -> int:
        return self._last

    def metrics(self) -> dict:
        return {
            "commits": self.commits,
            "reexecutions": self.reexecutions,
            "mean_retries": self.reexecutions / self.commits if self.commits else 0.0,
            "set_evictions": self.sets.evictions,
        }

    def stop(self) -> None:
        with self._cv:
            self._stopping = True
            self._cv.notify_all()

    def request_stop_locked(self) -> None:
        """Stop from inside an on_commit action (commit lock already held)."""
        self._stopping = True
        self._cv.notify_all()

    @property
    def stopping(self) -> bool:
        return self._stopping

    def reset(self) -> None:
        """Resynchronise with the store after a pause (e.g. a revert)."""
        with self._cv:
            self._stopping = False
            self._last = self.store.last_tx_id
            self.sets.clear()

    # -- Algorithm pieces --------------------------------------------------

    def _execute(self, body: TxBody, snap: Snapshot) -> _Execution:
        tx = self.store.begin(snap, latency=self.statement_latency, env=self.env)
        try:
            result = body(tx)
            status, reason = "ok", ""
        except TxAbort as exc:
            tx.discard_writes()
            result, status, reason = None, "failed", str(exc)
        rw = tx.finish()
        return _Execution(status, result, reason, rw, dict(tx.writes), dict(tx.fallback))

    def check_conflict(self, from_id: int, to_id: int, rw: RwSet, check_from_id: int = 0) -> bool:
        """Does any committed T_j with from_id < j <= to_id and j >= check_from_id conflict with rw?"""
        if from_id > to_id:
            raise ValueError("from_id must not exceed to_id")
        for j in range(max(from_id + 1, check_from_id), to_id + 1):
            other = self.sets.get(j)
            if other is None:
                raise InvariantBreach(f"read/write set of committed tx {j} is gone")
            if rw.conflicts_with(other):
                return True
        return False

    def wait_for_commit_progress(self, current: int) -> int:
        with self._cv:
            if self._last == current and not self._stopping:
                self.waits += 1
                self._cv.wait(self.wait_timeout)
            if self._stopping:
                raise Stopped()
            return self._last

    def commit_tx(self, k: int, ex: _Execution, on_commit: Optional[CommitAction] = None, attempts: int = 1) -> TxOutcome:
        """Commit under the commit lock (caller must hold it)."""
        if self._last != k - 1:
            raise InvariantBreach(f"commit of {k} while last committed is {self._last}")
        status, reason, writes = ex.status, ex.reason, ex.writes
        try:
            self.store.commit_writes(k, writes)
        except ConstraintViolation as exc:
            status, reason, writes = "failed", f"constraint: {exc}", ex.fallback
            try:
                self.store.commit_writes(k, writes)
            except ConstraintViolation:
                writes = {}
                self.store.commit_writes(k, writes)
            ex.rw.writes = {item: "update" for item in writes}
            ex.rw.writes.update(self.store.shadow_items(writes))
        self.sets.insert(k, ex.rw)
        self._last = k
        self.commits += 1
        outcome = TxOutcome(
            tx_id=k,
            status=status,
            result=ex.result if status == "ok" else None,
            rwset=ex.rw,
            writes=writes,
            attempts=attempts,
            reason=reason,
            commit_snapshot=Snapshot(self.store.csn, k),
        )
        if on_commit is not None:
            on_commit(k, outcome)
        self._cv.notify_all()
        return outcome

    def run_tx(self, k: int, body: TxBody, on_commit: Optional[CommitAction] = None) -> TxOutcome:
        attempts = 0
        while True:
            attempts += 1
            with self._cv:
                if self._stopping:
                    raise Stopped()
                oldest = self._last
                snap = self.store.take_snapshot()
            check_from_id = oldest + 1
            ex = self._execute(body, snap)
            conflict = False
            while oldest != k - 1:
                latest = self.wait_for_commit_progress(oldest)
                conflict = self.check_conflict(oldest, latest, ex.rw, check_from_id)
                oldest = latest
                if conflict:
                    break
            if conflict:
                self.reexecutions += 1
                continue
            with self._cv:
                if self._stopping:
                    raise Stopped()
                return self.commit_tx(k, ex, on_commit, attempts)


def run_serial(store: Store, bodies: list[TxBody], env: Any = None) -> list[TxOutcome]:
    """Reference execution: one transaction at a time, each on a fresh snapshot."""
    outcomes = []
    for body in bodies:
        k = store.last_tx_id + 1
        tx = store.begin(store.take_snapshot(), env=env)
        status, reason, result = "ok", "", None
        try:
            result = body(tx)
            writes = dict(tx.writes)
        except TxAbort as exc:
            status, reason, writes = "failed", str(exc), {}
        try:
            store.commit_writes(k, writes)
        except ConstraintViolation as exc:
            status, reason, result, writes = "failed", f"constraint: {exc}", None, {}
            store.commit_writes(k, writes)
        outcomes.append(TxOutcome(k, status, result if status == "ok" else None, tx.rw, writes, reason=reason))
    return outcomes


class WorkerPool:
    """Worker threads that each claim the next log index and run it.

    ``source(k)`` returns ``(body, on_commit)`` for index ``k``, blocking until
    it exists; it returns ``None`` when the pool is stopping. ``sink(k,
    outcome)`` receives every committed outcome.
    """

    def __init__(
        self,
        executor: DeterministicExecutor,
        source: Callable[[int], Optional[tuple[TxBody, Optional[CommitAction]]]],
        sink: Callable[[int, TxOutcome], None],
        workers: Optional[int] = None,
        name: str = "worker",
    ) -> None:
        self.executor = executor
        self.source = source
        self.sink = sink
        self.workers = workers or executor.workers
        self.name = name
        self._next = 0
        self._claim = threading.Lock()
        self._threads: list[threading.Thread] = []
        self.error: Optional[BaseException] = None

    def start(self, first_index: int) -> None:
        self._next = first_index
        self._threads = [
            threading.Thread(target=self._loop, name=f"{self.name}-{i}", daemon=True) for i in range(self.workers)
        ]
        for t in self._threads:
            t.start()

    def _loop(self) -> None:
        ex = self.executor
        while not ex.stopping:
            with self._claim:
                k = self._next
                self._next += 1
            task = self.source(k)
            if task is None:
                return
            body, on_commit = task
            try:
                outcome = ex.run_tx(k, body, on_commit)
            except Stopped:
                return
            except BaseException as exc:  # pragma: no cover - surfaced to the owner
                log.exception("worker crashed on tx %d", k)
                self.error = exc
                ex.stop()
                return
            self.sink(k, outcome)

    def stop(self) -> None:
        self.executor.stop()
        self.join()

    def join(self, timeout: Optional[float] = None) -> None:
        for t in self._threads:
            t.join(timeout)

    @property
    def alive(self) -> bool:
        return any(t.is_alive() for t in self._threads)


def run_concurrent(executor: DeterministicExecutor, bodies: list[TxBody]) -> list[TxOutcome]:
    """Execute ``bodies`` as log positions last+1.. with the executor's workers."""
    base = executor.last_committed_tx_id
    n = len(bodies)
    outcomes: dict[int, TxOutcome] = {}
    done = threading.Event()
    lock = threading.Lock()

    def source(k: int):
        if k > base + n:
            return None
        return bodies[k - base - 1], None

    def sink(k: int, outcome: TxOutcome) -> None:
        with lock:
            outcomes[k] = outcome
            if len(outcomes) == n:
                done.set()

    pool = WorkerPool(executor, source, sink)
    if n == 0:
        return []
    pool.start(base + 1)
    while not done.wait(0.05):
        if pool.error is not None:
            raise RuntimeError("worker failed") from pool.error
        if not pool.alive and len(outcomes) < n:
            raise RuntimeError("workers exited early")
    pool.join()
    return [outcomes[k] for k in range(base + 1, base + n + 1)]
