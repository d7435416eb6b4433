"""Threaded near-line pipeline: ingest queue, encoder workers, index table."""
from __future__ import annotations

import itertools
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .. import scl
from .clock import WallClock
from .store import IndexTable, VersionedRep, freshness_report

log = logging.getLogger(__name__)

_STOP = object()


class IngestError(ValueError):
    pass


@dataclass
class ItemEvent:
    item_id: int
    modal_feature: np.ndarray
    t_introduced: float | None = None


@dataclass
class Ticket:
    """Handle on one ingested event; ``wait`` blocks until it is committed or dead-lettered."""

    seq: int
    event: ItemEvent
    done: threading.Event = field(default_factory=threading.Event)
    result: VersionedRep | None = None
    error: str | None = None

    def wait(self, timeout: float | None = None) -> VersionedRep | None:
        if not self.done.wait(timeout):
            raise TimeoutError(f"event {self.seq} not processed within {timeout}s")
        return self.result


class Pipeline:
    """Events for one item always go to the same worker, so per-item commits follow ingest order.

    ``queue_capacity`` bounds the number of events waiting across all
    workers; ``ingest`` blocks while it is reached. ``encode_delay`` adds a
    simulated encoder cost, taken from ``clock``.
    """

    def __init__(
        self,
        encoder: Mapping[str, np.ndarray] | None = None,
        *,
        n_workers: int = 2,
        queue_capacity: int = 64,
        clock=None,
        encode_delay: float = 0.0,
        encode_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        d_in: int | None = None,
        table: IndexTable | None = None,
    ):
        if n_workers < 1 or queue_capacity < 1:
            raise ValueError("need at least one worker and one queue slot")
        if encode_fn is None:
            if encoder is None:
                raise ValueError("either encoder params or encode_fn is required")
            params = dict(encoder)
            encode_fn = lambda x: scl.encode(params, x[None])[0]  # noqa: E731
            d_in = params["enc0.w"].shape[0]
        self.encode_fn = encode_fn
        self.d_in = d_in
        self.clock = clock or WallClock()
        self.encode_delay = encode_delay
        self.table = table if table is not None else IndexTable()
        self.n_workers = n_workers
        self.dead_letters: list[tuple[Ticket, str]] = []
        self.rejected: list[dict] = []
        self._slots = threading.BoundedSemaphore(queue_capacity)
        self._queues = [queue.Queue() for _ in range(n_workers)]
        self._seq = itertools.count()
        self._enqueue_lock = threading.Lock()
        self._dl_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    def start(self) -> "Pipeline":
        if not self._threads:
            for w in range(self.n_workers):
                t = threading.Thread(target=self._run, args=(w,), name=f"encode-worker-{w}", daemon=True)
                t.start()
                self._threads.append(t)
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def ingest(self, event: ItemEvent, timeout: float | None = None) -> Ticket:
        """Queue an event; blocks while the queue is full (``queue.Full`` after ``timeout``)."""
        feat = np.asarray(event.modal_feature, dtype=np.float32)
        if self.d_in is not None and feat.shape != (self.d_in,):
            err = f"modal_feature has shape {feat.shape}, encoder expects ({self.d_in},)"
            self.rejected.append({"item_id": event.item_id, "error": err})
            raise IngestError(err)
        ev = ItemEvent(int(event.item_id), feat, self.clock.now() if event.t_introduced is None else event.t_introduced)
        if not self._slots.acquire(timeout=timeout):
            raise queue.Full("ingest queue full")
        with self._enqueue_lock:
            ticket = Ticket(next(self._seq), ev)
            self._queues[ev.item_id % self.n_workers].put(ticket)
        return ticket

    def _run(self, w: int) -> None:
        q = self._queues[w]
        while True:
            ticket = q.get()
            if ticket is _STOP:
                q.task_done()
                return
            self._slots.release()
            try:
                self._process(ticket)
            finally:
                ticket.done.set()
                q.task_done()

    def _process(self, ticket: Ticket) -> None:
        ev = ticket.event
        try:
            rep = np.asarray(self.encode_fn(ev.modal_feature), dtype=np.float32)
            if not np.all(np.isfinite(rep)):
                raise FloatingPointError("non-finite representation")
            self.clock.sleep(self.encode_delay)
        except Exception as exc:  # any encoder failure dead-letters the event
            ticket.error = f"{type(exc).__name__}: {exc}"
            with self._dl_lock:
                self.dead_letters.append((ticket, ticket.error))
            log.warning("dead-lettered event %d for item %d: %s", ticket.seq, ev.item_id, ticket.error)
            return
        ticket.result = self.table.commit(ev.item_id, rep, self.clock.now(), ev.t_introduced, ticket.seq)

    def drain(self) -> None:
        for q in self._queues:
            q.join()

    def stop(self, drain: bool = True) -> None:
        if drain:
            self.drain()
        for q in self._queues:
            q.put(_STOP)
        for t in self._threads:
            t.join()
        self._threads = []

    def get_rep(self, item_id: int):
        return self.table.get(item_id)

    def freshness_report(self, window=None) -> dict:
        return freshness_report(list(self.table.commit_times), window)

    def stats(self) -> dict:
        return {
            "items": len(self.table),
            "dead_letters": len(self.dead_letters),
            "rejected": len(self.rejected),
            "freshness": self.freshness_report(),
        }
