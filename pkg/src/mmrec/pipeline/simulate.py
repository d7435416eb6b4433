"""Deterministic discrete-event rendition of the pipeline on simulated time."""
from __future__ import annotations

import heapq
import json
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .. import scl
from .service import ItemEvent
from .store import IndexTable, freshness_report


def read_events(path: str | Path) -> list[ItemEvent]:
    """JSONL rows ``{"item_id", "modal_feature", "t_introduced"}``; malformed rows raise with their line number."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                events.append(ItemEvent(int(row["item_id"]), np.asarray(row["modal_feature"], dtype=np.float32), float(row["t_introduced"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event row ({exc})") from None
    return events


def write_events(path: str | Path, events: Iterable[ItemEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            row = {"item_id": int(e.item_id), "modal_feature": [float(x) for x in e.modal_feature], "t_introduced": float(e.t_introduced)}
            fh.write(json.dumps(row) + "\n")


def simulate(
    events: Iterable[ItemEvent],
    encoder: Mapping[str, np.ndarray] | None = None,
    *,
    n_workers: int = 2,
    encode_time: float = 0.005,
    encode_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> dict:
    """Replay events through ``n_workers`` FIFO workers (sharded by item id) with a fixed encode cost.

    Events are taken in ``(t_introduced, input order)`` order. Returns the
    index table, dead letters and a freshness report; everything is a pure
    function of the inputs.
    """
    if encode_fn is None:
        params = dict(encoder)
        encode_fn = lambda x: scl.encode(params, x[None])[0]  # noqa: E731
    evs = sorted(enumerate(events), key=lambda p: (p[1].t_introduced, p[0]))
    free_at = [0.0] * n_workers
    pending = []
    for seq, ev in evs:
        w = ev.item_id % n_workers
        start = max(free_at[w], ev.t_introduced)
        free_at[w] = start + encode_time
        heapq.heappush(pending, (free_at[w], w, seq, ev))
    table = IndexTable()
    dead = []
    while pending:
        t_ready, w, seq, ev = heapq.heappop(pending)
        try:
            rep = np.asarray(encode_fn(np.asarray(ev.modal_feature, dtype=np.float32)), dtype=np.float32)
            if not np.all(np.isfinite(rep)):
                raise FloatingPointError("non-finite representation")
        except Exception as exc:
            dead.append({"seq": seq, "item_id": ev.item_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        table.commit(ev.item_id, rep, t_ready, ev.t_introduced, seq)
    return {"table": table, "dead_letters": dead, "freshness": freshness_report(table.commit_times)}


def report_json(result: Mapping) -> dict:
    table = result["table"]
    return {
        "commits": len(table.commit_times),
        "items": len(table),
        "dead_letters": result["dead_letters"],
        "freshness": result["freshness"],
    }
