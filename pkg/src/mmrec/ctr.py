"""ID-based CTR model and its multimodal integration variants.

Every variant shares the same ID side: hashed embedding tables for item,
category and user, plus target attention over the behavior sequence's
item+category embeddings. Variants append fixed-width multimodal blocks
before a PReLU MLP head:

=============  ==============================================================
id_base        ID block only
vector         target rep and mean-pooled behavior reps
simscore       per-position similarity scores, zero-padded to ``L_max``
simtier        length-normalised SimTier histogram
make           frozen MAKE knowledge vector (or MAKE trained jointly)
simtier_make   both of the above
mm_only        vector + simtier blocks with no ID features at all
=============  ==============================================================
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import make as mk
from . import metrics
from . import tensor as T
from .layers import attention_pool, batches, init_attention, init_mlp, mlp
from .optim import Adam
from .simtier import DEFAULT_TIERS, sim_scores, simtier_from_scores, simtier_feature
from .synthdata import Impressions
from .tensor import Graph

log = logging.getLogger(__name__)

VARIANT_BLOCKS: dict[str, tuple[str, ...]] = {
    "id_base": ("ids",),
    "vector": ("ids", "vector"),
    "simscore": ("ids", "simscore"),
    "simtier": ("ids", "simtier"),
    "make": ("ids", "make"),
    "simtier_make": ("ids", "simtier", "make"),
    "mm_only": ("vector", "simtier"),
}
VARIANTS = tuple(VARIANT_BLOCKS)
TABLE3_VARIANTS = ("id_base", "vector", "simscore", "simtier", "make", "simtier_make")

_HASH_MULT = 2654435761


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CtrConfig:
    d_id: int = 16
    att_hidden: int = 32
    head: tuple[int, ...] = (128, 64, 1)
    lr: float = 2e-3
    batch_size: int = 1024
    epochs: int = 1
    simtier_n: int = DEFAULT_TIERS
    oov_buckets: int = 64
    make_trainable: bool = False
    seed: int = 0

    def __post_init__(self):
        self.head = tuple(self.head)


@dataclass
class World:
    """What the model may know about the catalog: vocabulary sizes, categories, representations."""

    n_items: int
    n_users: int
    category_ids: np.ndarray
    L_max: int
    reps: np.ndarray | None = None
    make_params: dict[str, np.ndarray] | None = None

    @property
    def n_categories(self) -> int:
        return int(self.category_ids.max()) + 1

    @property
    def d_rep(self) -> int:
        return 0 if self.reps is None else int(self.reps.shape[1])


@dataclass
class VariantSpec:
    name: str
    blocks: tuple[str, ...]
    head: tuple[int, ...]
    block_widths: dict[str, int]

    @property
    def input_width(self) -> int:
        return sum(self.block_widths[b] for b in self.blocks)


def variant_spec(name: str, world: World, cfg: CtrConfig) -> VariantSpec:
    if name not in VARIANT_BLOCKS:
        raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
    mcfg = mk.MakeConfig()
    widths = {
        "ids": 4 * cfg.d_id,
        "vector": 2 * world.d_rep,
        "simscore": world.L_max,
        "simtier": cfg.simtier_n,
        "make": mk.knowledge_width(world.d_rep, mcfg),
    }
    return VariantSpec(name, VARIANT_BLOCKS[name], cfg.head, widths)


def hash_bucket(ids, vocab: int, oov_buckets: int) -> np.ndarray:
    """In-vocabulary ids map to themselves; others to a stable hashed OOV row; padding stays -1."""
    ids = np.asarray(ids, dtype=np.int64)
    oov = (ids >= vocab) & (ids >= 0)
    hashed = vocab + ((ids.astype(np.uint64) * np.uint64(_HASH_MULT)) % np.uint64(2**32) % np.uint64(oov_buckets)).astype(np.int64)
    return np.where(oov, hashed, ids)


def init_params(spec: VariantSpec, world: World, cfg: CtrConfig) -> dict[str, np.ndarray]:
    """ID-side parameters depend only on the seed, so every variant starts from the same tables."""
    params: dict[str, np.ndarray] = {}
    if "ids" in spec.blocks:
        rng_id = np.random.default_rng([cfg.seed, 0])
        d = cfg.d_id
        params["id.item"] = rng_id.normal(0, 0.05, size=(world.n_items + cfg.oov_buckets, d)).astype(np.float32)
        params["id.cat"] = rng_id.normal(0, 0.05, size=(world.n_categories + cfg.oov_buckets, d)).astype(np.float32)
        params["id.user"] = rng_id.normal(0, 0.05, size=(world.n_users + cfg.oov_buckets, d)).astype(np.float32)
        init_attention(rng_id, params, "din.att", d, cfg.att_hidden)
    rng_head = np.random.default_rng([cfg.seed, 1])
    init_mlp(rng_head, params, "head", [spec.input_width, *spec.head])
    if "make" in spec.blocks and cfg.make_trainable:
        params.update(mk.init_make(world.d_rep, seed=cfg.seed))
    return params


# ---------------------------------------------------------------------------
# side features


def side_features(block: str, imp: Impressions, world: World, cfg: CtrConfig) -> np.ndarray:
    """Precomputed (non-trainable) inputs for one multimodal block, one row per record."""
    if world.reps is None:
        raise ValueError(f"block {block!r} needs item representations")
    reps = world.reps
    mk.check_reps(reps, np.concatenate([imp.behavior.reshape(-1), imp.target_item_ids]))
    mask = imp.mask
    if block == "make":
        if world.make_params is None:
            raise ValueError("make block needs pre-trained MAKE parameters")
        kv = mk.knowledge_table(world.make_params, reps, imp)
        kv[~mask.any(axis=1)] = 0.0
        return kv
    out = []
    for s in range(0, len(imp), 8192):
        sl = slice(s, s + 8192)
        seq = mk.gather_reps(reps, imp.behavior[sl])
        tgt = reps[imp.target_item_ids[sl]]
        m = mask[sl]
        if block == "vector":
            cnt = np.maximum(m.sum(axis=1, keepdims=True), 1)
            out.append(np.concatenate([tgt, seq.sum(axis=1) / cnt], axis=1))
        elif block == "simscore":
            out.append(sim_scores(tgt, seq, m))
        elif block == "simtier":
            counts = simtier_from_scores(sim_scores(tgt, seq, m), m, cfg.simtier_n)
            out.append(simtier_feature(counts, m.sum(axis=1)))
        else:
            raise ValueError(f"unknown block {block!r}")
    width = variant_spec("mm_only", world, cfg).block_widths[block]
    return np.concatenate(out).astype(np.float32) if out else np.zeros((0, width), dtype=np.float32)


def build_side(spec: VariantSpec, imp: Impressions, world: World, cfg: CtrConfig, cache: dict | None = None) -> dict[str, np.ndarray]:
    side = {}
    for b in spec.blocks:
        if b == "ids" or (b == "make" and cfg.make_trainable):
            continue
        # cache entries hold the dataset itself so a recycled id() can never match
        hit = cache.get((b, id(imp))) if cache is not None else None
        if hit is not None and hit[0] is imp:
            side[b] = hit[1]
        else:
            side[b] = side_features(b, imp, world, cfg)
            if cache is not None:
                cache[(b, id(imp))] = (imp, side[b])
    return side


# ---------------------------------------------------------------------------
# model


def assemble_graph(g: Graph, spec: VariantSpec, imp: Impressions, idx: np.ndarray, side: Mapping[str, np.ndarray], world: World, cfg: CtrConfig):
    parts = []
    for block in spec.blocks:
        if block == "ids":
            tgt = imp.target_item_ids[idx]
            beh = imp.behavior[idx]
            items_t = g.param("id.item")
            cats_t = g.param("id.cat")
            n_cat = world.n_categories
            item_e = T.embedding(items_t, hash_bucket(tgt, world.n_items, cfg.oov_buckets))
            cat_e = T.embedding(cats_t, hash_bucket(_category_of(world, tgt), n_cat, cfg.oov_buckets))
            user_e = T.embedding(g.param("id.user"), hash_bucket(imp.user_ids[idx], world.n_users, cfg.oov_buckets))
            seq_e = T.embedding(items_t, hash_bucket(beh, world.n_items, cfg.oov_buckets)) + T.embedding(
                cats_t, hash_bucket(_category_of(world, beh), n_cat, cfg.oov_buckets)
            )
            din, _ = attention_pool(g, "din.att", seq_e, beh >= 0, item_e + cat_e)
            parts += [item_e, cat_e, user_e, din]
        elif block == "make" and cfg.make_trainable:
            reps = world.reps
            seq = g.constant(mk.gather_reps(reps, imp.behavior[idx]))
            _, v_make, hidden = mk.make_graph(g, seq, imp.behavior[idx] >= 0, g.constant(reps[imp.target_item_ids[idx]]))
            nonempty = (imp.behavior[idx] >= 0).any(axis=1).astype(np.float32)[:, None]
            parts += [v_make, hidden * nonempty]
        else:
            parts.append(g.constant(side[block][idx]))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def _category_of(world: World, ids: np.ndarray) -> np.ndarray:
    cats = world.category_ids[np.clip(ids, 0, len(world.category_ids) - 1)]
    return np.where((ids >= 0) & (ids < len(world.category_ids)), cats, np.where(ids < 0, -1, world.n_categories))


def forward_graph(g: Graph, spec: VariantSpec, imp: Impressions, idx, side, world: World, cfg: CtrConfig):
    x = assemble_graph(g, spec, imp, idx, side, world, cfg)
    out, _ = mlp(g, "head", len(spec.head), x)
    return T.reshape(out, (len(idx),))


def assemble_features(
    params: Mapping[str, np.ndarray],
    variant: str,
    imp: Impressions,
    world: World,
    cfg: CtrConfig | None = None,
    idx=None,
) -> np.ndarray:
    """Model input vectors (before the head) for the selected records."""
    cfg = cfg or CtrConfig()
    spec = variant_spec(variant, world, cfg)
    idx = np.arange(len(imp)) if idx is None else np.atleast_1d(np.asarray(idx))
    sub = imp.subset(idx)
    side = build_side(spec, sub, world, cfg)
    g = Graph(params, record=False)
    return assemble_graph(g, spec, sub, np.arange(len(sub)), side, world, cfg).data


def predict(params, spec: VariantSpec, imp: Impressions, side, world: World, cfg: CtrConfig, batch_size: int = 1024) -> np.ndarray:
    out = []
    for s in range(0, len(imp), batch_size):
        idx = np.arange(s, min(s + batch_size, len(imp)))
        g = Graph(params, record=False)
        out.append(forward_graph(g, spec, imp, idx, side, world, cfg).data)
    z = np.concatenate(out).astype(np.float64) if out else np.zeros(0)
    return 1.0 / (1.0 + np.exp(-z))


def evaluate(probs: np.ndarray, imp: Impressions) -> dict:
    return {
        "gauc": metrics.safe(metrics.gauc, probs, imp.labels, imp.user_ids),
        "auc": metrics.safe(metrics.auc, probs, imp.labels),
        "logloss": metrics.logloss(probs, imp.labels),
    }


@dataclass
class CtrRun:
    variant: str
    params: dict[str, np.ndarray]
    metrics: dict
    eval_probs: np.ndarray
    curve: list[dict] = field(default_factory=list)
    max_visits: int = 0


def train_ctr(
    train: Impressions,
    eval_set: Impressions,
    variant: str,
    world: World,
    cfg: CtrConfig | None = None,
    cache: dict | None = None,
) -> CtrRun:
    """Train one variant with Adam for ``cfg.epochs`` passes (one by default); evaluate on the held-out split.

    Each epoch visits every training record exactly once in a seeded order;
    ``max_visits`` on the result records the largest per-record visit count.
    """
    cfg = cfg or CtrConfig()
    spec = variant_spec(variant, world, cfg)
    params = init_params(spec, world, cfg)
    side_tr = build_side(spec, train, world, cfg, cache)
    side_ev = build_side(spec, eval_set, world, cfg, cache)
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    labels = train.labels.astype(np.float32)
    visits = np.zeros(len(train), dtype=np.int64)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        for idx in batches(len(train), cfg.batch_size, rng):
            g = Graph(params)
            try:
                logits = forward_graph(g, spec, train, idx, side_tr, world, cfg)
                loss = T.reduce_mean(T.sigmoid_cross_entropy(logits, labels[idx]))
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"{variant}: non-finite value in epoch {epoch} at op {exc.op}") from exc
            opt.step(params, g.backward(loss))
            visits[idx] += 1
        if cfg.epochs > 1:
            probs = predict(params, spec, eval_set, side_ev, world, cfg)
            curve.append({"epoch": epoch, **evaluate(probs, eval_set)})
    probs = predict(params, spec, eval_set, side_ev, world, cfg)
    return CtrRun(variant, params, evaluate(probs, eval_set), probs, curve, int(visits.max(initial=0)))


def epoch_sweep(train: Impressions, eval_set: Impressions, variant: str, world: World, max_epochs: int, cfg: CtrConfig | None = None, cache=None) -> list[dict]:
    """Held-out metrics after each of ``max_epochs`` consecutive passes over the same data."""
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    cfg = cfg or CtrConfig()
    sweep_cfg = CtrConfig(**{**cfg.__dict__, "epochs": max_epochs})
    run = train_ctr(train, eval_set, variant, world, sweep_cfg, cache)
    if max_epochs == 1:
        return [{"epoch": 1, **run.metrics}]
    return run.curve


def lifts(metrics_variant: Mapping, metrics_base: Mapping) -> dict:
    """Absolute differences ``variant - base`` per metric (None when either side is undefined)."""
    out = {}
    for k in ("gauc", "auc", "logloss"):
        a, b = metrics_variant.get(k), metrics_base.get(k)
        out[k] = None if a is None or b is None else a - b
    return out


def freq_bucket_eval(
    train: Impressions,
    eval_set: Impressions,
    probs_id: np.ndarray,
    probs_mm: np.ndarray,
    n_items: int,
    n_buckets: int = 8,
) -> list[dict]:
    """Relative AUC/LogLoss improvement of MM over ID per item-frequency bucket.

    Items are ordered by training-split frequency (ties by item id) and cut
    into ``n_buckets`` groups of near-equal size; bucket 1 holds the rarest.
    Relative improvement is ``|m_MM - m_ID| / m_ID``; undefined buckets report None.
    """
    counts = np.bincount(train.target_item_ids, minlength=n_items)[:n_items]
    order = np.lexsort((np.arange(n_items), counts))
    groups = np.array_split(order, n_buckets)
    bucket_of = np.empty(n_items, dtype=np.int64)
    for b, items in enumerate(groups):
        bucket_of[items] = b
    ev_bucket = bucket_of[eval_set.target_item_ids]
    rows = []
    for b, items in enumerate(groups):
        sel = ev_bucket == b
        y = eval_set.labels[sel]
        auc_id = metrics.safe(metrics.auc, probs_id[sel], y) if sel.any() else None
        auc_mm = metrics.safe(metrics.auc, probs_mm[sel], y) if sel.any() else None
        ll_id = metrics.logloss(probs_id[sel], y) if sel.any() else None
        ll_mm = metrics.logloss(probs_mm[sel], y) if sel.any() else None
        rows.append({
            "bucket": b + 1,
            "n_items": int(len(items)),
            "n_records": int(sel.sum()),
            "train_freq_max": int(counts[items].max()) if len(items) else 0,
            "auc_id": auc_id,
            "auc_mm": auc_mm,
            "rel_auc_improvement": None if auc_id is None or auc_mm is None else abs(auc_mm - auc_id) / auc_id,
            "rel_logloss_improvement": None if ll_id is None or ll_mm is None or ll_id == 0 else abs(ll_mm - ll_id) / ll_id,
        })
    return rows
