"""SimTier: a histogram of target-vs-behavior similarity scores.

The score range [-1, 1] is cut into ``n_tiers`` left-open intervals
``(2t/N - 1, 2(t+1)/N - 1]``; a score of exactly -1 lands in tier 0. Each
tier counts the non-padded behavior items whose score falls into it.
"""
from __future__ import annotations

import numpy as np

DEFAULT_TIERS = 20


def sim_scores(target_rep, seq_reps, mask=None) -> np.ndarray:
    """Dot products ``v_i . v_c`` clamped to [-1, 1]; padded slots are 0.

    Accepts a single sequence (``target`` (d,), ``seq`` (L, d)) or a batch
    (``target`` (B, d), ``seq`` (B, L, d)).
    """
    tgt = np.asarray(target_rep, dtype=np.float64)
    seq = np.asarray(seq_reps, dtype=np.float64)
    if seq.ndim != tgt.ndim + 1 or seq.shape[-1] != tgt.shape[-1]:
        raise ValueError(f"sim_scores: dim mismatch, target {tgt.shape} vs sequence {seq.shape}")
    s = np.clip(np.einsum("...ld,...d->...l", seq, tgt), -1.0, 1.0)
    if mask is not None:
        s = np.where(np.asarray(mask, dtype=bool), s, 0.0)
    return s


def tier_edges(n_tiers: int) -> np.ndarray:
    """Inner tier boundaries ``2t/N - 1`` for ``t = 1..N-1``."""
    t = np.arange(1, n_tiers, dtype=np.float64)
    return (2.0 * t - n_tiers) / n_tiers


def tier_index(scores, n_tiers: int) -> np.ndarray:
    """``ceil((s+1)/2 * N) - 1`` clamped to [0, N-1], evaluated as edge comparisons.

    Counting the boundaries strictly below ``s`` keeps scores that sit on an
    edge in the lower tier regardless of rounding in ``(s+1)/2 * N``.
    """
    s = np.clip(np.asarray(scores, dtype=np.float64), -1.0, 1.0)
    return np.searchsorted(tier_edges(n_tiers), s, side="left").astype(np.int64)


def simtier_from_scores(scores, mask, n_tiers: int = DEFAULT_TIERS, paper_faithful: bool = False) -> np.ndarray:
    """Tier counts from precomputed scores; works on (L,) or (B, L)."""
    if n_tiers < 1:
        raise ValueError("n_tiers must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    m = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    squeeze = s.ndim == 1
    s, m = np.atleast_2d(s), np.atleast_2d(m)
    if paper_faithful:
        # verbatim index rule: ceil((s+1)/2*N) compared against 0..N-1
        idx = np.where(s <= -1.0, 0, tier_index(s, n_tiers) + 1)
        keep = m & (idx < n_tiers)
    else:
        idx = tier_index(s, n_tiers)
        keep = m
    rows = np.broadcast_to(np.arange(s.shape[0])[:, None], s.shape)
    counts = np.zeros((s.shape[0], n_tiers), dtype=np.int64)
    np.add.at(counts, (rows[keep], idx[keep]), 1)
    return counts[0] if squeeze else counts


def simtier(target_rep, seq_reps, mask=None, n_tiers: int = DEFAULT_TIERS, paper_faithful: bool = False) -> np.ndarray:
    """Tier-count vector(s) for one sequence or a batch of sequences."""
    return simtier_from_scores(sim_scores(target_rep, seq_reps, mask), mask, n_tiers, paper_faithful)


def simtier_feature(counts, length=None, log_scale: bool = False) -> np.ndarray:
    """Length-normalised tier counts (or ``log1p`` counts) for model input.

    ``length`` defaults to the count total; an empty sequence yields zeros.
    """
    c = np.asarray(counts, dtype=np.float64)
    if log_scale:
        return np.log1p(c)
    if length is None:
        length = c.sum(axis=-1)
    denom = np.maximum(np.asarray(length, dtype=np.float64), 1.0)
    return c / (denom[..., None] if np.ndim(denom) else denom)
