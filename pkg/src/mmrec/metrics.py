"""AUC, impression-weighted GAUC and LogLoss."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

PROB_CLIP = 1e-7


class NotDefinedError(ValueError):
    """The metric is undefined for this input (e.g. a single class)."""


def auc(scores, labels) -> float:
    """Rank-sum AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be equal-length and non-empty")
    n_pos = int((y == 1).sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NotDefinedError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, groups) -> float:
    """Per-group AUC averaged with weights equal to each group's record count.

    Groups with a single class are skipped entirely: they leave both the
    weighted sum and the total weight.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    g = np.asarray(groups).reshape(-1)
    if not (s.shape == y.shape == g.shape):
        raise ValueError("scores, labels and groups must have equal length")
    order = np.argsort(g, kind="stable")
    g_sorted = g[order]
    starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
    ends = np.r_[starts[1:], len(g_sorted)]
    num = 0.0
    den = 0.0
    for a, b in zip(starts, ends):
        idx = order[a:b]
        yy = y[idx]
        pos = int(yy.sum())
        if pos == 0 or pos == len(idx):
            continue
        w = float(len(idx))
        num += w * auc(s[idx], yy)
        den += w
    if den == 0:
        raise NotDefinedError("GAUC needs at least one group containing both classes")
    return num / den


def logloss(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64).reshape(-1), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("probs and labels must be equal-length and non-empty")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def safe(fn, *args):
    """Metric value or ``None`` when undefined."""
    try:
        return fn(*args)
    except NotDefinedError:
        return None
