"""Versioned index table mapping item id to its latest representation."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VersionedRep:
    item_id: int
    rep: np.ndarray
    version: int
    t_ready: float
    t_introduced: float = 0.0
    event_seq: int = -1

    @property
    def latency(self) -> float:
        return self.t_ready - self.t_introduced


class NotFound:
    """Typed miss returned by :meth:`IndexTable.get`."""

    __slots__ = ("item_id",)

    def __init__(self, item_id: int):
        self.item_id = item_id

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"NotFound({self.item_id})"


class IndexTable:
    """Latest committed rep per item plus a bounded per-item history.

    A commit builds a new immutable :class:`VersionedRep` (read-only array
    copy) and swaps it in under a lock, so readers only ever see whole
    records. ``keep_log`` retains every commit for audits.
    """

    def __init__(self, history: int = 4, keep_log: bool = False):
        self._lock = threading.Lock()
        self._latest: dict[int, VersionedRep] = {}
        self._history: dict[int, deque] = {}
        self.history_size = history
        self.log: list[VersionedRep] | None = [] if keep_log else None
        self.commit_times: list[tuple[float, float]] = []

    def commit(self, item_id: int, rep, t_ready: float, t_introduced: float = 0.0, event_seq: int = -1) -> VersionedRep:
        arr = np.array(rep, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        with self._lock:
            prev = self._latest.get(item_id)
            rec = VersionedRep(int(item_id), arr, 1 if prev is None else prev.version + 1, float(t_ready), float(t_introduced), int(event_seq))
            self._latest[item_id] = rec
            if self.history_size > 0:
                self._history.setdefault(item_id, deque(maxlen=self.history_size)).append(rec)
            if self.log is not None:
                self.log.append(rec)
            self.commit_times.append((rec.t_introduced, rec.t_ready))
        return rec

    def get(self, item_id: int) -> VersionedRep | NotFound:
        rec = self._latest.get(item_id)
        return NotFound(item_id) if rec is None else rec

    def history(self, item_id: int) -> list[VersionedRep]:
        with self._lock:
            return list(self._history.get(item_id, ()))

    def records(self) -> list[VersionedRep]:
        with self._lock:
            return list(self._latest.values())

    def __len__(self) -> int:
        return len(self._latest)


def freshness_report(commit_times, window: tuple[float, float] | None = None) -> dict:
    """p50/p95/max of ``t_ready - t_introduced`` over commits whose ``t_ready`` lies in ``window``.

    ``commit_times`` holds ``(t_introduced, t_ready)`` pairs.
    """
    times = np.asarray(list(commit_times), dtype=np.float64).reshape(-1, 2)
    if window is not None:
        lo, hi = window
        times = times[(times[:, 1] >= lo) & (times[:, 1] <= hi)]
    if len(times) == 0:
        return {}
    lat = times[:, 1] - times[:, 0]
    p50, p95 = np.percentile(lat, [50, 95])
    return {"n": int(len(lat)), "p50": float(p50), "p95": float(p95), "max": float(lat.max())}
