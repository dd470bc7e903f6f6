"""Client request signing and majority aggregation of replica envelopes.

Votes are keyed by ``(result_hash, updated partition roots)`` so a replica
whose state diverged is caught even when its query result agrees. In
result-only mode the roots are left out of the key, which is the weaker
scheme kept for comparison.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

from .bus import Bus
from .crypto import KeyPair
from .logsvc import LogBackend, SignedRequest
from .replica import ResultEnvelope, result_hash

log = logging.getLogger(__name__)

PENDING = "pending"
DECIDED = "decided"
NO_MAJORITY = "no-majority"


class Client:
    """A signing identity with a local sequence counter."""

    def __init__(self, client_id: str, keypair: KeyPair, log_backend: LogBackend, first_seq: int = 1) -> None:
        self.client_id = client_id
        self.keypair = keypair
        self.log = log_backend
        self.next_seq = first_seq
        self._lock = threading.Lock()

    def sign(self, procedure: str, args: Iterable[bytes], seq: Optional[int] = None) -> SignedRequest:
        req = SignedRequest(self.client_id, seq if seq is not None else self.next_seq, procedure, tuple(args))
        return SignedRequest(req.client_id, req.seq, req.procedure, req.args, self.keypair.sign(req.signed_bytes()))

    def sign_and_submit(self, procedure: str, *args: bytes) -> int:
        # the lock keeps append order equal to seq order for this client
        with self._lock:
            req = self.sign(procedure, args)
            index = self.log.append(req)
            self.next_seq += 1
            return index

    def resubmit(self, request: SignedRequest) -> int:
        """Append an already-signed request again (a replay attempt)."""
        return self.log.append(request)


@dataclass(frozen=True)
class Alert:
    log_index: int
    decided: Optional[tuple]
    divergent: frozenset[int]
    reason: str  # result-mismatch | state-mismatch | equivocation | bad-signature


@dataclass
class AggregationEntry:
    log_index: int
    votes: dict[tuple, set[int]] = field(default_factory=dict)
    by_replica: dict[int, ResultEnvelope] = field(default_factory=dict)
    verdict: str = PENDING
    decided: Optional[tuple] = None
    divergent: set[int] = field(default_factory=set)
    full_result: Any = None
    kind: str = "user"

    @property
    def voters(self) -> int:
        return len(self.by_replica)


class Aggregator:
    """Per-index majority over the full replica set."""

    def __init__(
        self,
        replica_keys: Mapping[int, bytes],
        scheme,
        bus: Optional[Bus] = None,
        mode: str = "state",
        fetch_full: Optional[Callable[[int, int], Optional[tuple]]] = None,
    ) -> None:
        if mode not in ("state", "result"):
            raise ValueError("mode must be 'state' or 'result'")
        self.replica_keys = dict(replica_keys)
        self.n = len(self.replica_keys)
        self.scheme = scheme
        self.bus = bus
        self.mode = mode
        self.fetch_full = fetch_full
        self.entries: dict[int, AggregationEntry] = {}
        self.alerts: list[Alert] = []
        self.dropped = 0
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)

    def attach(self, bus: Bus) -> None:
        self.bus = bus
        bus.results.subscribe(self.ingest)

    def _raise(self, alert: Alert) -> None:
        self.alerts.append(alert)
        log.info("alert at %d: %s replicas %s", alert.log_index, alert.reason, sorted(alert.divergent))
        if self.bus is not None:
            self.bus.alerts.publish(alert)

    def ingest(self, env: ResultEnvelope) -> Optional[AggregationEntry]:
        if env.replayed:
            return None
        public = self.replica_keys.get(env.replica_id)
        if public is None or not self.scheme.verify(public, env.signed_region(), env.signature):
            with self._lock:
                self.dropped += 1
                self._raise(Alert(env.log_index, None, frozenset({env.replica_id}), "bad-signature"))
            return None
        key = env.vote_key(with_state=self.mode == "state")
        with self._cv:
            entry = self.entries.get(env.log_index)
            if entry is None:
                entry = self.entries[env.log_index] = AggregationEntry(env.log_index, kind=env.kind)
            prior = entry.by_replica.get(env.replica_id)
            if prior is not None:
                if prior.vote_key(self.mode == "state") != key:
                    self._raise(Alert(env.log_index, entry.decided, frozenset({env.replica_id}), "equivocation"))
                return entry
            entry.by_replica[env.replica_id] = env
            entry.votes.setdefault(key, set()).add(env.replica_id)
            if env.full_result is not None and entry.full_result is None:
                entry.full_result = env.full_result
            self._update_verdict(entry, env, key)
            self._cv.notify_all()
            return entry

    def _update_verdict(self, entry: AggregationEntry, env: ResultEnvelope, key: tuple) -> None:
        majority = self.n // 2 + 1
        if entry.verdict == PENDING:
            for value, ids in entry.votes.items():
                if len(ids) >= majority:
                    entry.verdict = DECIDED
                    entry.decided = value
                    break
            else:
                best = max(len(ids) for ids in entry.votes.values())
                if best + (self.n - entry.voters) < majority:
                    entry.verdict = NO_MAJORITY
            if entry.verdict == DECIDED:
                late = set()
                for value, ids in entry.votes.items():
                    if value != entry.decided:
                        late |= ids
                self._flag(entry, late)
        elif entry.verdict == DECIDED and key != entry.decided:
            self._flag(entry, {env.replica_id})

    def _flag(self, entry: AggregationEntry, ids: set[int]) -> None:
        new = ids - entry.divergent
        if not new:
            return
        entry.divergent |= new
        # a matching result hash means only the state differs
        same_result = all(entry.by_replica[r].result_hash == entry.decided[0] for r in new)
        reason = "state-mismatch" if same_result else "result-mismatch"
        self._raise(Alert(entry.log_index, entry.decided, frozenset(new), reason))

    # -- queries -----------------------------------------------------------

    def verdict(self, index: int) -> Optional[AggregationEntry]:
        with self._lock:
            return self.entries.get(index)

    def wait_verdict(self, index: int, timeout: Optional[float] = None, settled: bool = False) -> Optional[AggregationEntry]:
        """Wait until ``index`` leaves pending (or, with ``settled``, all N voted)."""

        def ready() -> bool:
            e = self.entries.get(index)
            if e is None:
                return False
            return e.voters == self.n if settled else e.verdict != PENDING

        with self._cv:
            self._cv.wait_for(ready, timeout)
            return self.entries.get(index)

    def flagged(self) -> dict[int, frozenset[int]]:
        """log index -> divergent replica ids, for every flagged index."""
        with self._lock:
            return {i: frozenset(e.divergent) for i, e in sorted(self.entries.items()) if e.divergent}

    def undecided(self) -> list[int]:
        """Indexes whose votes can no longer reach a majority."""
        with self._lock:
            return sorted(i for i, e in self.entries.items() if e.verdict == NO_MAJORITY)

    def full_result(self, index: int) -> Optional[tuple]:
        """The decided full result, fetched from a majority member if the leader's is bad."""
        entry = self.verdict(index)
        if entry is None or entry.verdict != DECIDED:
            return None
        want = entry.decided[0]
        if entry.full_result is not None and result_hash(*entry.full_result) == want:
            return entry.full_result
        if self.fetch_full is None:
            return None
        for rid in sorted(entry.votes[entry.decided]):
            candidate = self.fetch_full(rid, index)
            if candidate is not None and result_hash(*candidate) == want:
                return candidate
        return None
