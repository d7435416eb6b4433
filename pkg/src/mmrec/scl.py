"""Semantic-aware contrastive pre-training of item encoders.

A query encoder and a momentum key encoder (same MLP shape, outputs
L2-normalised) are trained on <query, purchased item, hard negative>
triplets with InfoNCE against a FIFO bank of past keys plus an optional
dot-product triplet hinge. The temperature is learned through ``log_tau``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import checkpoint
from . import tensor as T
from .layers import batches, init_dense
from .optim import Adam
from .synthdata import TripletSet
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

ENCODER_KEYS = ("enc0.w", "enc0.b", "enc1.w", "enc1.b")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 3e-3
    momentum: float = 0.999
    bank_size: int = 4096
    margin: float = 0.2
    triplet_weight: float = 1.0
    use_moco: bool = True
    use_triplet: bool = True
    hidden: int = 64
    d_rep: int = 32
    init_tau: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0 or self.triplet_weight < 0:
            raise ValueError("margin and triplet_weight must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if min(self.batch_size, self.bank_size, self.hidden, self.d_rep) < 1 or self.epochs < 0:
            raise ValueError("batch_size, bank_size, hidden and d_rep must be >= 1; epochs >= 0")
        if self.lr <= 0 or self.init_tau <= 0:
            raise ValueError("lr and init_tau must be > 0")


class MemoryBank:
    """Fixed-capacity FIFO ring of unit vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self.buffer = np.zeros((capacity, dim), dtype=np.float32)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.fill = 0

    def enqueue(self, reps: np.ndarray, ids=None) -> None:
        """FIFO append; ``ids`` (item ids of the keys, optional) travel with them."""
        reps = np.asarray(reps, dtype=np.float32)
        ids = np.full(len(reps), -1, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if reps.ndim != 2 or reps.shape[1] != self.buffer.shape[1]:
            raise ValueError(f"bank_enqueue: expected (n, {self.buffer.shape[1]}), got {reps.shape}")
        norms = np.linalg.norm(reps, axis=1)
        if reps.size and np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ValueError("bank_enqueue: representations must be unit-norm")
        if len(reps) >= self.capacity:
            reps, ids = reps[-self.capacity :], ids[-self.capacity :]
        n = len(reps)
        end = self.cursor + n
        if end <= self.capacity:
            self.buffer[self.cursor : end] = reps
            self.ids[self.cursor : end] = ids
        else:
            k = self.capacity - self.cursor
            self.buffer[self.cursor :] = reps[:k]
            self.buffer[: n - k] = reps[k:]
            self.ids[self.cursor :] = ids[:k]
            self.ids[: n - k] = ids[k:]
        self.cursor = end % self.capacity
        self.fill = min(self.capacity, self.fill + n)

    def contents(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self.fill < self.capacity:
            return self.buffer[: self.fill].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def active(self) -> np.ndarray:
        """Filled slots in storage order (cheap; order is irrelevant to the loss)."""
        return self.buffer[: self.fill]

    def active_ids(self) -> np.ndarray:
        return self.ids[: self.fill]


@dataclass
class EncoderState:
    query: dict[str, np.ndarray]
    key: dict[str, np.ndarray]
    log_tau: np.ndarray
    momentum: float
    bank: MemoryBank | None = None

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    def to_params(self) -> dict[str, np.ndarray]:
        out = {f"query.{k}": v for k, v in self.query.items()}
        out.update({f"key.{k}": v for k, v in self.key.items()})
        out["log_tau"] = np.asarray(self.log_tau, dtype=np.float32)
        return out

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], momentum: float = 0.999) -> "EncoderState":
        q = {k[6:]: np.array(v) for k, v in params.items() if k.startswith("query.")}
        k_ = {k[4:]: np.array(v) for k, v in params.items() if k.startswith("key.")}
        return cls(q, k_ or {k: v.copy() for k, v in q.items()}, np.array(params["log_tau"], dtype=np.float32), momentum)


def init_encoder(d_raw: int, hidden: int = 64, d_rep: int = 32, seed: int = 0, init_tau: float = 0.07, momentum: float = 0.999) -> EncoderState:
    rng = np.random.default_rng(seed)
    q: dict[str, np.ndarray] = {}
    init_dense(rng, q, "enc0", d_raw, hidden)
    init_dense(rng, q, "enc1", hidden, d_rep)
    q["enc0.w"] *= np.float32(np.sqrt(2.0))
    return EncoderState(q, {k: v.copy() for k, v in q.items()}, np.array(math.log(init_tau), dtype=np.float32), momentum)


def encode_graph(g: Graph, x: Tensor, prefix: str = "") -> Tensor:
    h = T.relu(x @ g.param(prefix + "enc0.w") + g.param(prefix + "enc0.b"))
    return T.l2_normalize(h @ g.param(prefix + "enc1.w") + g.param(prefix + "enc1.b"))


def encode(params: Mapping[str, np.ndarray], features, batch_size: int = 8192) -> np.ndarray:
    """Unit-norm representations of a batch of raw feature vectors.

    Raises :class:`mmrec.tensor.DegenerateNormError` if the encoder maps an
    input to (numerically) the zero vector.
    """
    x = np.asarray(features, dtype=np.float32)
    w0 = params["enc0.w"]
    if x.ndim != 2 or x.shape[1] != w0.shape[0]:
        raise ValueError(f"encode: expected features of dim {w0.shape[0]}, got shape {x.shape}")
    out = []
    for s in range(0, len(x), batch_size):
        g = Graph(params, record=False)
        out.append(encode_graph(g, g.constant(x[s : s + batch_size])).data)
    if not out:
        return np.zeros((0, params["enc1.w"].shape[1]), dtype=np.float32)
    return np.concatenate(out)


EXCLUDED_LOGIT = -1e9


def infonce_graph(g: Graph, q: Tensor, k_pos: Tensor, negatives: Tensor, log_tau: Tensor, exclude=None) -> Tensor:
    """Per-row InfoNCE; the positive logit sits in column 0 next to every negative.

    ``negatives`` is (K, d) shared by all rows. ``exclude`` (B, K) bool drops
    negatives that are copies of the row's own positive item.
    """
    inv_tau = T.exp(log_tau * -1.0)
    pos = T.reshape(T.dot(q, k_pos), (q.shape[0], 1))
    neg = q @ T.transpose(negatives)
    logits = T.concat([pos, neg], axis=1) * inv_tau
    if exclude is not None and np.any(exclude):
        bias = np.zeros(logits.shape)
        bias[:, 1:][exclude] = EXCLUDED_LOGIT
        logits = logits + bias
    return T.softmax_cross_entropy(logits, np.zeros(q.shape[0], dtype=np.int64))


def infonce_loss(q, k_pos, bank, tau: float) -> float:
    """InfoNCE of one query (or a batch, averaged) against a bank of negatives.

    ``-log(exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k_i/tau)))`` with the
    positive inside the denominator, evaluated by log-sum-exp.
    """
    negs = bank.active() if isinstance(bank, MemoryBank) else np.asarray(bank)
    if len(negs) == 0:
        raise ValueError("infonce_loss: memory bank is empty")
    if tau <= 0:
        raise ValueError("infonce_loss: tau must be positive")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k = np.atleast_2d(np.asarray(k_pos, dtype=np.float64))
    g = Graph(dtype=np.float64, record=False)
    loss = infonce_graph(g, g.constant(q), g.constant(k), g.constant(negs), g.constant(math.log(tau)))
    return float(loss.data.mean())


def triplet_graph(q: Tensor, p: Tensor, n: Tensor, margin: float) -> Tensor:
    return T.relu(T.dot(q, n) - T.dot(q, p) + margin)


def triplet_loss(q, p, n, margin: float = 0.2) -> float:
    """``max(0, q.n - q.p + margin)`` (averaged over rows for batches)."""
    q, p, n = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (q, p, n))
    return float(np.mean(np.maximum(0.0, (q * n).sum(-1) - (q * p).sum(-1) + margin)))


def momentum_update(key: Mapping[str, np.ndarray], query: Mapping[str, np.ndarray], m: float) -> dict[str, np.ndarray]:
    """``key <- m * key + (1 - m) * query``, elementwise per parameter."""
    if set(key) != set(query):
        raise ValueError("momentum_update: parameter names differ")
    out = {}
    for name, kv in key.items():
        qv = query[name]
        if np.shape(kv) != np.shape(qv):
            raise ValueError(f"momentum_update: shape mismatch for {name!r}: {np.shape(kv)} vs {np.shape(qv)}")
        if m == 1.0:
            out[name] = np.array(kv, copy=True)
        elif m == 0.0:
            out[name] = np.array(qv, copy=True)
        else:
            out[name] = (m * kv + (1.0 - m) * qv).astype(np.asarray(kv).dtype)
    return out


def total_loss_graph(
    g: Graph,
    xq: np.ndarray,
    kp: np.ndarray | Tensor,
    kn: np.ndarray | Tensor,
    negatives: np.ndarray | None,
    cfg: PretrainConfig,
    exclude: np.ndarray | None = None,
) -> Tensor | None:
    """InfoNCE (when ``negatives`` is given) plus weighted triplet hinge, batch-averaged.

    ``kp``/``kn`` may be constants (momentum keys) or tensors on ``g``.
    Returns ``None`` when neither term is active.
    """
    q = encode_graph(g, g.constant(xq))
    kp_t = kp if isinstance(kp, Tensor) else g.constant(kp)
    kn_t = kn if isinstance(kn, Tensor) else g.constant(kn)
    terms = []
    if negatives is not None:
        neg_t = negatives if isinstance(negatives, Tensor) else g.constant(negatives)
        terms.append(T.reduce_mean(infonce_graph(g, q, kp_t, neg_t, g.param("log_tau"), exclude)))
    if cfg.use_triplet:
        terms.append(T.reduce_mean(triplet_graph(q, kp_t, kn_t, cfg.margin)) * cfg.triplet_weight)
    if not terms:
        return None
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


@dataclass
class PretrainResult:
    state: EncoderState
    epochs: list[dict] = field(default_factory=list)


def config_hash(obj) -> str:
    import hashlib

    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_encoder(path, state: EncoderState, meta: Mapping | None = None) -> None:
    checkpoint.save(path, state.to_params(), meta)


def load_encoder(path) -> tuple[EncoderState, dict]:
    params, meta = checkpoint.load(path)
    return EncoderState.from_params(params, meta.get("momentum", 0.999)), meta


def pretrain(
    triplets: TripletSet,
    cfg: PretrainConfig,
    out_dir: str | Path | None = None,
    eval_fn=None,
) -> PretrainResult:
    """Train the query encoder and ``log_tau`` with Adam; returns final state and per-epoch metrics.

    Keys always come from the momentum encoder and never receive gradients.
    With ``use_moco`` the negatives are the memory bank, and InfoNCE is
    skipped until the bank holds at least one batch; without it the other
    positives of the current batch are the negatives. Negatives that are
    copies of a row's own positive item are masked out. ``eval_fn(state)``
    may return extra per-epoch metrics. When ``out_dir`` is set a
    checkpoint plus JSON sidecar is written after every epoch.
    """
    if len(triplets) == 0:
        raise ValueError("pretrain: empty triplet set")
    d_raw = triplets.query.shape[1]
    state = init_encoder(d_raw, cfg.hidden, cfg.d_rep, cfg.seed, cfg.init_tau, cfg.momentum)
    state.bank = MemoryBank(cfg.bank_size, cfg.d_rep) if cfg.use_moco else None
    result = PretrainResult(state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(asdict(cfg))
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(lr=cfg.lr)
    curve: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in batches(len(triplets), cfg.batch_size, rng):
            xq, xp, xn = triplets.query[idx], triplets.positive[idx], triplets.hard_negative[idx]
            trainable = {**state.query, "log_tau": state.log_tau.reshape(())}
            g = Graph(trainable)
            try:
                kp = encode(state.key, xp)
                kn = encode(state.key, xn)
                ids = triplets.positive_item_id[idx]
                if cfg.use_moco:
                    if state.bank.fill >= cfg.batch_size:
                        negs = state.bank.active()
                        exclude = ids[:, None] == state.bank.active_ids()[None, :]
                    else:
                        negs = exclude = None
                else:
                    # the other positives of this batch are the negatives
                    negs = kp if len(idx) > 1 else None
                    exclude = ids[:, None] == ids[None, :]
                loss = total_loss_graph(g, xq, kp, kn, negs, cfg, exclude)
                if loss is not None:
                    grads = g.backward(loss)
            except (T.NonFiniteError, T.DegenerateNormError) as exc:
                if out is not None:
                    save_encoder(out / "diverged_prev_step.mmt", state, {"epoch": epoch, "config_hash": chash})
                raise TrainingDiverged(f"pretrain diverged in epoch {epoch}: {exc}") from exc
            if loss is not None:
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"pretrain: non-finite loss in epoch {epoch}")
                opt.step(trainable, grads)
                state.query = {k: trainable[k] for k in state.query}
                state.log_tau = np.asarray(trainable["log_tau"], dtype=np.float32)
                losses.append(loss.item())
            state.key = momentum_update(state.key, state.query, cfg.momentum)
            if cfg.use_moco:
                state.bank.enqueue(kp, ids)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        curve.append(mean_loss)
        row = {"epoch": epoch, "loss": mean_loss, "tau": state.tau}
        if eval_fn is not None:
            row.update(eval_fn(state))
        result.epochs.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
        if out is not None:
            save_encoder(out / f"encoder_epoch{epoch}.mmt", state, {"epoch": epoch, "config_hash": chash, "momentum": cfg.momentum})
            sidecar = {"epoch": epoch, "loss_curve": curve, "config_hash": chash, "metrics": row}
            (out / f"encoder_epoch{epoch}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    return result
