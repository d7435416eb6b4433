"""Multimodal knowledge extractor (MAKE).

Target attention over pre-trained item representations feeds a four-layer
PReLU MLP that predicts clicks. It is pre-trained for several epochs on the
CTR log on its own, then frozen; the downstream model consumes the pooled
vector together with every hidden activation of the MLP.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import metrics
from . import tensor as T
from .layers import attention_pool, batches, init_attention, init_mlp, mlp
from .optim import Adam
from .synthdata import Impressions
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

MLP_WIDTHS = (64, 32, 16, 1)


@dataclass
class MakeConfig:
    att_hidden: int = 32
    widths: tuple[int, ...] = MLP_WIDTHS
    lr: float = 2e-3
    batch_size: int = 256
    epochs: int = 4
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4 or self.widths[-1] != 1:
            raise ValueError("MAKE MLP must have exactly four layers ending in a scalar")


@dataclass
class KnowledgeVector:
    v_make: np.ndarray
    hidden: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v_make, self.hidden], axis=-1)


def hidden_width(cfg: MakeConfig | None = None) -> int:
    widths = (cfg or MakeConfig()).widths
    return int(sum(widths[:-1]))


def knowledge_width(d_rep: int, cfg: MakeConfig | None = None) -> int:
    return d_rep + hidden_width(cfg)


def init_make(d_rep: int, cfg: MakeConfig | None = None, seed: int | None = None, prefix: str = "make.") -> dict[str, np.ndarray]:
    cfg = cfg or MakeConfig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, np.ndarray] = {}
    init_attention(rng, params, prefix + "att", d_rep, cfg.att_hidden)
    init_mlp(rng, params, prefix + "mlp", [d_rep, *cfg.widths])
    return params


def make_graph(g: Graph, seq: Tensor, mask: np.ndarray, target: Tensor, prefix: str = "make.") -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(logits (B,), v_make (B, d), hidden (B, 112))``."""
    v_make, _ = attention_pool(g, prefix + "att", seq, mask, target)
    out, hidden = mlp(g, prefix + "mlp", 4, v_make)
    return T.reshape(out, (out.shape[0],)), v_make, T.concat(hidden, axis=-1)


def din_attention(params: Mapping[str, np.ndarray], seq_reps, mask, target_rep, prefix: str = "make.") -> tuple[np.ndarray, np.ndarray]:
    """Attention-pooled vector and the attention weights, for one sequence or a batch."""
    seq, msk, tgt, single = _as_batch(seq_reps, mask, target_rep)
    g = Graph(params, record=False)
    pooled, weights = attention_pool(g, prefix + "att", g.constant(seq), msk, g.constant(tgt))
    if single:
        return pooled.data[0], weights.data[0]
    return pooled.data, weights.data


def _as_batch(seq_reps, mask, target_rep):
    seq = np.asarray(seq_reps, dtype=np.float32)
    tgt = np.asarray(target_rep, dtype=np.float32)
    single = tgt.ndim == 1
    if single:
        seq, tgt = seq[None], tgt[None]
    if seq.ndim != 3 or seq.shape[0] != tgt.shape[0] or seq.shape[2] != tgt.shape[1]:
        raise ValueError(f"dim mismatch: sequence {np.shape(seq_reps)} vs target {np.shape(target_rep)}")
    msk = np.ones(seq.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(seq.shape[:2])
    return seq, msk, tgt, single


def make_forward(params: Mapping[str, np.ndarray], seq_reps, mask, target_rep, prefix: str = "make.") -> tuple[np.ndarray, np.ndarray]:
    """Logit and concatenated hidden activations, for one sequence or a batch."""
    seq, msk, tgt, single = _as_batch(seq_reps, mask, target_rep)
    g = Graph(params, record=False)
    logits, _, hidden = make_graph(g, g.constant(seq), msk, g.constant(tgt), prefix)
    if single:
        return logits.data[0], hidden.data[0]
    return logits.data, hidden.data


def make_loss(logits, labels) -> float:
    """Mean binary cross-entropy of ``sigmoid(logits)``, in the stable logit form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def extract_knowledge(params: Mapping[str, np.ndarray], seq_reps, mask, target_rep, prefix: str = "make.") -> KnowledgeVector:
    """Frozen-parameter knowledge: pooled vector plus all MLP hidden activations."""
    seq, msk, tgt, single = _as_batch(seq_reps, mask, target_rep)
    g = Graph(params, record=False)
    _, v_make, hidden = make_graph(g, g.constant(seq), msk, g.constant(tgt), prefix)
    if single:
        return KnowledgeVector(v_make.data[0].copy(), hidden.data[0].copy())
    return KnowledgeVector(v_make.data.copy(), hidden.data.copy())


def check_reps(reps: np.ndarray, item_ids: np.ndarray) -> None:
    """Raise ``KeyError`` naming the first referenced item without a representation."""
    ids = np.unique(item_ids[item_ids >= 0])
    beyond = ids[ids >= len(reps)]
    if len(beyond):
        raise KeyError(f"no representation for item {int(beyond[0])}")
    bad = ids[~np.all(np.isfinite(reps[ids]), axis=1)]
    if len(bad):
        raise KeyError(f"no representation for item {int(bad[0])}")


def gather_reps(reps: np.ndarray, ids: np.ndarray) -> np.ndarray:
    out = reps[np.where(ids >= 0, ids, 0)]
    out[ids < 0] = 0.0
    return out


def knowledge_table(params: Mapping[str, np.ndarray], reps: np.ndarray, imp: Impressions, batch_size: int = 4096, prefix: str = "make.") -> np.ndarray:
    """Knowledge vectors for every record of an impression log."""
    out = []
    for s in range(0, len(imp), batch_size):
        sl = slice(s, s + batch_size)
        kv = extract_knowledge(params, gather_reps(reps, imp.behavior[sl]), imp.mask[sl], reps[imp.target_item_ids[sl]], prefix)
        out.append(kv.vector)
    width = reps.shape[1] + sum(params[f"{prefix}mlp{i}.b"].shape[0] for i in range(3))
    return np.concatenate(out) if out else np.zeros((0, width), dtype=np.float32)


def predict(params: Mapping[str, np.ndarray], reps: np.ndarray, imp: Impressions, batch_size: int = 4096, prefix: str = "make.") -> np.ndarray:
    out = []
    for s in range(0, len(imp), batch_size):
        sl = slice(s, s + batch_size)
        logits, _ = make_forward(params, gather_reps(reps, imp.behavior[sl]), imp.mask[sl], reps[imp.target_item_ids[sl]], prefix)
        out.append(logits)
    z = np.concatenate(out) if out else np.zeros(0)
    return 1.0 / (1.0 + np.exp(-z.astype(np.float64)))


def evaluate(probs: np.ndarray, imp: Impressions) -> dict:
    return {
        "gauc": metrics.safe(metrics.gauc, probs, imp.labels, imp.user_ids),
        "auc": metrics.safe(metrics.auc, probs, imp.labels),
        "logloss": metrics.logloss(probs, imp.labels),
    }


@dataclass
class MakeResult:
    params: dict[str, np.ndarray]
    epochs: list[dict] = field(default_factory=list)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def make_pretrain(
    train: Impressions,
    reps: np.ndarray,
    epochs: int,
    cfg: MakeConfig | None = None,
    eval_set: Impressions | None = None,
    snapshot_epochs=(),
) -> MakeResult:
    """Multi-epoch CTR pre-training of the attention unit and MLP on fixed representations.

    ``epochs=0`` returns the initialisation untouched. Held-out GAUC, AUC and
    LogLoss are recorded after every epoch when ``eval_set`` is given. A copy
    of the parameters after each epoch in ``snapshot_epochs`` is kept in
    ``snapshots``; training is deterministic, so the snapshot at epoch ``k``
    equals the result of a ``k``-epoch run.
    """
    cfg = cfg or MakeConfig()
    reps = np.asarray(reps, dtype=np.float32)
    check_reps(reps, np.concatenate([train.behavior.reshape(-1), train.target_item_ids]))
    if eval_set is not None:
        check_reps(reps, np.concatenate([eval_set.behavior.reshape(-1), eval_set.target_item_ids]))
    params = init_make(reps.shape[1], cfg)
    result = MakeResult(params)
    if 0 in snapshot_epochs:
        result.snapshots[0] = {k: v.copy() for k, v in params.items()}
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    labels = train.labels.astype(np.float32)
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in batches(len(train), cfg.batch_size, rng):
            g = Graph(params)
            seq = g.constant(gather_reps(reps, train.behavior[idx]))
            logits, _, _ = make_graph(g, seq, train.behavior[idx] >= 0, g.constant(reps[train.target_item_ids[idx]]))
            loss = T.reduce_mean(T.sigmoid_cross_entropy(logits, labels[idx]))
            opt.step(params, g.backward(loss))
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "train_loss": total / max(count, 1)}
        if eval_set is not None:
            row.update(evaluate(predict(params, reps, eval_set), eval_set))
        result.epochs.append(row)
        if epoch in snapshot_epochs:
            result.snapshots[epoch] = {k: v.copy() for k, v in params.items()}
        log.info("make epoch %d: %s", epoch, row)
    return result
