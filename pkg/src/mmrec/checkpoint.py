"""Parameter checkpoints.

Layout: the 8-byte magic ``MMRECTNS``, a little-endian uint64 header length,
a UTF-8 JSON header listing each tensor's name, shape and byte offset into
the payload, then the little-endian float32 payloads back to back. The
header is written with sorted keys so equal parameters give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMRECTNS"


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not a parameter checkpoint")
    if len(blob) < 16:
        raise CheckpointError("truncated header length")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']!r}")
        params[e["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
    return params, header.get("meta", {})


def save(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
