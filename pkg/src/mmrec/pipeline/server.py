"""Newline-delimited JSON over TCP in front of a :class:`Pipeline`."""
from __future__ import annotations

import json
import logging
import socketserver

import numpy as np

from .service import IngestError, ItemEvent, Pipeline
from .store import NotFound

log = logging.getLogger(__name__)


def handle_request(pipeline: Pipeline, msg: dict, timeout: float | None = 30.0) -> dict:
    op = msg.get("op")
    try:
        if op == "put_item":
            ticket = pipeline.ingest(ItemEvent(int(msg["item_id"]), np.asarray(msg["modal_feature"], dtype=np.float32)), timeout=timeout)
            rec = ticket.wait(timeout)
            if rec is None:
                return {"ok": False, "error": ticket.error or "dead_lettered"}
            return {"ok": True, "version": rec.version}
        if op == "get_rep":
            rec = pipeline.get_rep(int(msg["item_id"]))
            if isinstance(rec, NotFound):
                return {"ok": False, "error": "not_found"}
            return {"ok": True, "version": rec.version, "rep": [float(x) for x in rec.rep]}
        if op == "stats":
            return {"ok": True, **pipeline.freshness_report()}
        return {"ok": False, "error": f"unknown op {op!r}"}
    except (KeyError, TypeError, ValueError, IngestError) as exc:
        return {"ok": False, "error": f"bad request: {exc}"}
    except Exception as exc:
        log.exception("request failed")
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                if not isinstance(msg, dict):
                    raise ValueError("frame must be a JSON object")
                reply = handle_request(self.server.pipeline, msg)
            except ValueError as exc:
                reply = {"ok": False, "error": f"bad frame: {exc}"}
            self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
            self.wfile.flush()


class PipelineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, pipeline: Pipeline):
        self.pipeline = pipeline
        super().__init__(address, _Handler)


def serve(pipeline: Pipeline, host: str = "127.0.0.1", port: int = 7070) -> None:
    with pipeline, PipelineServer((host, port), pipeline) as srv:
        log.info("serving on %s:%d", *srv.server_address)
        srv.serve_forever()
