"""Total-order, append-only shared input log.

The in-process backend keeps entries in a list guarded by a condition
variable. Entries are hash-chained: each carries its predecessor's hash and
is re-verified when read. A consensus-backed log would implement the same
``LogBackend`` surface.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from . import encoding, hashing

GENESIS_HASH = hashing.ZERO_HASH


class LogCorrupted(Exception):
    pass


@dataclass(frozen=True)
class SignedRequest:
    client_id: str
    seq: int
    procedure: str
    args: tuple[bytes, ...]
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return encoding.encode(("request", self.client_id, self.seq, self.procedure, tuple(self.args)))

    def to_wire(self) -> tuple:
        return ("user", self.client_id, self.seq, self.procedure, tuple(self.args), self.signature)


@dataclass(frozen=True)
class CompareStates:
    round_id: int
    admin_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return encoding.encode(("compareStates", self.round_id))

    def to_wire(self) -> tuple:
        return ("compare", self.round_id, self.admin_signature)


@dataclass(frozen=True)
class SaveSyncState:
    round_id: int
    reference_ids: tuple[int, ...]
    admin_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return encoding.encode(("saveSyncState", self.round_id, tuple(self.reference_ids)))

    def to_wire(self) -> tuple:
        return ("sync", self.round_id, tuple(self.reference_ids), self.admin_signature)


@dataclass(frozen=True)
class KeyUpdate:
    client_id: str
    public_key: bytes
    permissions: tuple[str, ...]
    admin_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return encoding.encode(("keyUpdate", self.client_id, self.public_key, tuple(self.permissions)))

    def to_wire(self) -> tuple:
        return ("key", self.client_id, self.public_key, tuple(self.permissions), self.admin_signature)


Payload = Union[SignedRequest, CompareStates, SaveSyncState, KeyUpdate]


def payload_to_bytes(payload: Payload) -> bytes:
    return encoding.encode(payload.to_wire())


def payload_from_bytes(data: bytes) -> Payload:
    wire = encoding.decode(data)
    tag = wire[0]
    if tag == "user":
        _, cid, seq, proc, args, sig = wire
        return SignedRequest(cid, seq, proc, tuple(args), sig)
    if tag == "compare":
        return CompareStates(wire[1], wire[2])
    if tag == "sync":
        return SaveSyncState(wire[1], tuple(wire[2]), wire[3])
    if tag == "key":
        return KeyUpdate(wire[1], wire[2], tuple(wire[3]), wire[4])
    raise ValueError(f"unknown payload tag {tag!r}")


def _entry_hash(index: int, prev_hash: bytes, payload_bytes: bytes) -> bytes:
    return hashing.digest(encoding.encode((index, prev_hash, payload_bytes)))


@dataclass(frozen=True)
class LogEntry:
    index: int
    prev_hash: bytes
    payload: Payload
    payload_bytes: bytes = field(repr=False)
    entry_hash: bytes = field(repr=False)

    def verify(self, prev_hash: bytes) -> None:
        if self.prev_hash != prev_hash:
            raise LogCorrupted(f"entry {self.index}: broken chain link")
        if _entry_hash(self.index, self.prev_hash, self.payload_bytes) != self.entry_hash:
            raise LogCorrupted(f"entry {self.index}: hash mismatch")
        if payload_to_bytes(self.payload) != self.payload_bytes:
            raise LogCorrupted(f"entry {self.index}: payload altered")


class LogBackend(ABC):
    """The boundary a consensus service would implement."""

    @abstractmethod
    def append(self, payload: Payload) -> int: ...

    @abstractmethod
    def get(self, index: int, timeout: Optional[float] = None) -> Optional[LogEntry]: ...

    @abstractmethod
    def current_offset(self) -> int: ...

    def subscribe(self, from_index: int = 1, stop: Optional[threading.Event] = None, poll: float = 0.05) -> Iterator[LogEntry]:
        """Entries from ``from_index`` onward in order; blocks at the tail."""
        if from_index < 1:
            raise ValueError("log indexes start at 1")
        k = from_index
        while stop is None or not stop.is_set():
            entry = self.get(k, timeout=poll)
            if entry is None:
                continue
            yield entry
            k += 1


class InProcessLog(LogBackend):
    def __init__(self) -> None:
        self._entries: list[LogEntry] = []
        self._cv = threading.Condition()

    def append(self, payload: Payload) -> int:
        data = payload_to_bytes(payload)
        with self._cv:
            index = len(self._entries) + 1
            prev = self._entries[-1].entry_hash if self._entries else GENESIS_HASH
            self._entries.append(LogEntry(index, prev, payload, data, _entry_hash(index, prev, data)))
            self._cv.notify_all()
            return index

    def get(self, index: int, timeout: Optional[float] = None) -> Optional[LogEntry]:
        if index < 1:
            raise ValueError("log indexes start at 1")
        entries = self._entries
        if index > len(entries):
            with self._cv:
                if index > len(entries) and not self._cv.wait_for(lambda: index <= len(entries), timeout):
                    return None
        entry = entries[index - 1]
        prev = entries[index - 2].entry_hash if index > 1 else GENESIS_HASH
        entry.verify(prev)
        return entry

    def current_offset(self) -> int:
        return len(self._entries)

    def dump_lines(self) -> list[str]:
        return [f"{e.index}\t{e.prev_hash.hex()}\t{e.payload_bytes.hex()}" for e in list(self._entries)]

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            for line in self.dump_lines():
                fh.write(line + "\n")

    @classmethod
    def from_lines(cls, lines) -> "InProcessLog":
        log = cls()
        for line in lines:
            line = line.strip()
            if not line:
                continue
            idx, prev, data = line.split("\t")
            payload = payload_from_bytes(bytes.fromhex(data))
            index = log.append(payload)
            entry = log._entries[-1]
            if index != int(idx) or entry.prev_hash.hex() != prev:
                raise LogCorrupted(f"dump line {idx} does not chain")
        return log

    @classmethod
    def load(cls, path: str) -> "InProcessLog":
        with open(path) as fh:
            return cls.from_lines(fh)
