"""Exact Top-N retrieval, Acc@N, and the Acc@1-vs-GAUC correlation export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

CORRELATION_HEADER = ["checkpoint", "acc1", "acc5", "gauc_lift"]


@dataclass
class RetrievalSet:
    queries: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        if len(self.queries) < 1 or len(self.queries) != len(self.positives):
            raise ValueError("retrieval set needs D >= 1 queries and as many positives")


def top_n(query, corpus, n: int) -> np.ndarray:
    """Indices of the ``n`` highest dot products, descending; ties go to the lower index."""
    corpus = np.asarray(corpus)
    if n > len(corpus):
        raise ValueError(f"top_n: N={n} exceeds corpus size {len(corpus)}")
    scores = corpus @ np.asarray(query)
    return np.argsort(-scores, kind="stable")[:n]


def true_positive_ranks(rset: RetrievalSet, chunk: int = 2048) -> np.ndarray:
    """0-based rank of each p_i in its own query's ranking over S, under the top_n tie rule."""
    P = np.asarray(rset.positives, dtype=np.float64)
    Q = np.asarray(rset.queries, dtype=np.float64)
    D = len(P)
    ranks = np.empty(D, dtype=np.int64)
    cols = np.arange(D)
    for s in range(0, D, chunk):
        scores = Q[s : s + chunk] @ P.T
        rows = np.arange(s, min(s + chunk, D))
        own = scores[rows - s, rows][:, None]
        ahead = (scores > own) | ((scores == own) & (cols[None, :] < rows[:, None]))
        ranks[rows] = ahead.sum(axis=1)
    return ranks


def acc_at_n(rset: RetrievalSet, n: int) -> float:
    """Fraction of queries whose own positive (by index) is in the top ``n`` of S."""
    return float(np.mean(true_positive_ranks(rset) < n))


def export_correlation(
    checkpoints: Sequence[Mapping],
    ctr_results: Mapping[str, float],
) -> list[list]:
    """Rows ``checkpoint, acc1, acc5, gauc_lift`` sorted by acc1, plus a Spearman footer.

    ``checkpoints`` items carry ``id``, ``acc1`` and ``acc5``; ``ctr_results``
    maps the same ids to GAUC lifts.
    """
    ids = [c["id"] for c in checkpoints]
    unmatched = sorted(set(ids) ^ set(ctr_results))
    if unmatched:
        raise KeyError(f"unmatched checkpoint ids: {unmatched}")
    rows = sorted(
        ([c["id"], float(c["acc1"]), float(c["acc5"]), float(ctr_results[c["id"]])] for c in checkpoints),
        key=lambda r: (r[1], r[0]),
    )
    if len(rows) >= 2:
        rho = spearmanr([r[1] for r in rows], [r[3] for r in rows]).statistic
    else:
        rho = float("nan")
    return [CORRELATION_HEADER, *rows, ["spearman_rho", float(rho), "", ""]]


def rows_to_csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.6f}"
    return "" if x is None else x
