"""Aggregate run JSON files into summary CSV tables.

Each CSV starts with a ``# config_hash: ...`` comment line naming the
configuration(s) that produced the runs.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable

from .ctr import lifts
from .retrieval import export_correlation, rows_to_csv


class ReportError(ValueError):
    pass


ARM_ORDER = ("full", "no_triplet", "no_triplet_moco", "untrained")


def dump_json(obj) -> str:
    """Canonical JSON used for every run artifact (sorted keys, fixed float repr)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_run(path: str | Path, run: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(run), encoding="utf-8")
    return path


def load_runs(root: str | Path) -> list[dict]:
    """Every ``*.json`` under ``root`` carrying a ``kind`` field, in path order."""
    runs = []
    for p in sorted(Path(root).rglob("*.json")):
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(doc, dict) and "kind" in doc and doc["kind"] != "report":
            doc["_path"] = str(p.relative_to(root))
            runs.append(doc)
    return runs


def _csv(header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if x is None else (f"{x:.6f}" if isinstance(x, float) else x) for x in r])
    return buf.getvalue()


def table2(runs: list[dict]) -> str:
    rows = {}
    for r in runs:
        if r["kind"] == "pretrain":
            final = r["epochs"][-1] if r["epochs"] else r.get("initial", {})
            rows[r["arm"]] = [r["arm"], final.get("acc1"), final.get("acc5")]
    order = sorted(rows, key=lambda a: (ARM_ORDER.index(a) if a in ARM_ORDER else len(ARM_ORDER), a))
    return _csv(["arm", "acc1", "acc5"], (rows[a] for a in order))


def _ctr_runs(runs):
    return [r for r in runs if r["kind"] == "ctr" and r.get("make_epochs_study") is None and r.get("encoder_id") is None]


def table3(runs: list[dict]) -> str:
    ctr = {r["variant"]: r for r in _ctr_runs(runs)}
    base = ctr.get("id_base")
    rows = []
    for v in sorted(ctr, key=lambda v: (v != "id_base", v)):
        m = ctr[v]["metrics"]
        lift = lifts(m, base["metrics"]) if base else {"gauc": None, "auc": None, "logloss": None}
        rows.append([v, m["gauc"], m["auc"], m["logloss"], lift["gauc"], lift["auc"], lift["logloss"]])
    return _csv(["variant", "gauc", "auc", "logloss", "gauc_lift", "auc_lift", "logloss_lift"], rows)


def fig3_curves(runs: list[dict]) -> str:
    rows = []
    for r in sorted((r for r in runs if r["kind"] == "epoch_sweep"), key=lambda r: r["variant"]):
        for pt in r["curve"]:
            rows.append([r["variant"], pt["epoch"], pt["gauc"], pt["auc"], pt["logloss"]])
    return _csv(["variant", "epoch", "gauc", "auc", "logloss"], rows)


def fig4a_correlation(runs: list[dict]) -> str:
    ckpts, lift = [], {}
    for r in runs:
        if r["kind"] == "retrieval" and r.get("encoder_id"):
            ckpts.append({"id": r["encoder_id"], "acc1": r["acc"]["1"], "acc5": r["acc"].get("5", float("nan"))})
    base = {r["variant"]: r for r in _ctr_runs(runs)}.get("id_base")
    for r in runs:
        if r["kind"] == "ctr" and r.get("encoder_id") and base is not None:
            lift[r["encoder_id"]] = r["metrics"]["gauc"] - base["metrics"]["gauc"]
    if not ckpts:
        return rows_to_csv([["checkpoint", "acc1", "acc5", "gauc_lift"]])
    return rows_to_csv(export_correlation(ckpts, lift))


def fig4b_buckets(runs: list[dict]) -> str:
    rows = []
    for r in runs:
        if r["kind"] == "buckets":
            for b in r["buckets"]:
                rows.append([b["bucket"], b["n_items"], b["n_records"], b["auc_id"], b["auc_mm"], b["rel_auc_improvement"], b["rel_logloss_improvement"]])
    return _csv(["bucket", "n_items", "n_records", "auc_id", "auc_mm", "rel_auc_improvement", "rel_logloss_improvement"], rows)


def fig6_make_epochs(runs: list[dict]) -> str:
    rows = []
    for r in runs:
        if r["kind"] == "ctr" and r.get("make_epochs_study") is not None:
            m = r["metrics"]
            rows.append([r["make_epochs_study"], r["variant"], m["gauc"], m["auc"], m["logloss"]])
    rows.sort(key=lambda x: (x[1], x[0]))
    return _csv(["make_epochs", "variant", "gauc", "auc", "logloss"], rows)


OUTPUTS = {
    "table2.csv": table2,
    "table3.csv": table3,
    "fig3_curves.csv": fig3_curves,
    "fig4a_correlation.csv": fig4a_correlation,
    "fig4b_buckets.csv": fig4b_buckets,
    "fig6_make_epochs.csv": fig6_make_epochs,
}


def build_report(runs_dir: str | Path, out_dir: str | Path, allow_mixed: bool = False) -> dict:
    """Write every summary CSV plus ``report.json``; returns the summary document."""
    runs = load_runs(runs_dir)
    if not runs:
        raise ReportError("no runs found")
    hashes = sorted({r.get("config_hash", "") for r in runs})
    if len(hashes) > 1 and not allow_mixed:
        raise ReportError(f"runs come from {len(hashes)} different configs ({', '.join(hashes)}); pass --allow-mixed to combine")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    stamp = "# config_hash: " + ",".join(hashes) + "\n"
    for name, fn in OUTPUTS.items():
        body = fn(runs)
        (out / name).write_text(stamp + body, encoding="utf-8")
        written[name] = body.count("\n") - 1
    summary = {
        "config_hashes": hashes,
        "seeds": sorted({r.get("seed") for r in runs if r.get("seed") is not None}),
        "n_runs": len(runs),
        "rows": written,
    }
    write_run(out / "report.json", {"kind": "report", **summary})
    return summary
