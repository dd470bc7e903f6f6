"""In-process publish/subscribe topics (results and alerts)."""

from __future__ import annotations

import logging
import queue
import threading
from typing import Any, Callable

log = logging.getLogger(__name__)

_STOP = object()


class Topic:
    """Asynchronous fan-out: publishers enqueue, one dispatcher thread delivers."""

    def __init__(self, name: str) -> None:
        self.name = name
        self._subscribers: list[Callable[[Any], None]] = []
        self._queue: "queue.SimpleQueue[Any]" = queue.SimpleQueue()
        self._thread = threading.Thread(target=self._run, name=f"topic-{name}", daemon=True)
        self._idle = threading.Condition()
        self._pending = 0
        self._thread.start()

    def subscribe(self, fn: Callable[[Any], None]) -> None:
        self._subscribers.append(fn)

    def publish(self, message: Any) -> None:
        with self._idle:
            self._pending += 1
        self._queue.put(message)

    def _run(self) -> None:
        while True:
            msg = self._queue.get()
            if msg is _STOP:
                return
            for fn in list(self._subscribers):
                try:
                    fn(msg)
                except Exception:  # pragma: no cover - subscriber bug
                    log.exception("subscriber on %s failed", self.name)
            with self._idle:
                self._pending -= 1
                if self._pending == 0:
                    self._idle.notify_all()

    def drain(self, timeout: float | None = None) -> bool:
        """Block until every published message has been delivered."""
        with self._idle:
            return self._idle.wait_for(lambda: self._pending == 0, timeout)

    def close(self) -> None:
        self._queue.put(_STOP)
        self._thread.join(timeout=1.0)


class Bus:
    def __init__(self) -> None:
        self.results = Topic("results")
        self.alerts = Topic("alerts")

    def close(self) -> None:
        self.results.close()
        self.alerts.close()
