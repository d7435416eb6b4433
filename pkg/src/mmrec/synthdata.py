"""Synthetic e-commerce world with planted semantic structure.

Items carry a hidden unit "latent" (their true semantics) clustered around
category centroids, and an observed ``modal_feature`` that is a fixed linear
image of the latent plus noise. Models only ever see modal features and ids;
latents and per-item click effects go to a separate ground-truth file.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

PAD = -1
DAY = 86400


class DatasetFormatError(ValueError):
    def __init__(self, path: str, line: int, reason: str):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {reason}")


@dataclass
class Item:
    item_id: int
    category_id: int
    modal_feature: np.ndarray
    frequency_weight: float
    latent: np.ndarray | None = None


@dataclass
class Catalog:
    category_ids: np.ndarray
    modal_features: np.ndarray
    frequency_weights: np.ndarray
    latents: np.ndarray | None = None
    id_effects: np.ndarray | None = None
    n_clusters: int = 0

    def __len__(self) -> int:
        return len(self.category_ids)

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(len(self))

    def item(self, i: int) -> Item:
        lat = None if self.latents is None else self.latents[i]
        return Item(i, int(self.category_ids[i]), self.modal_features[i], float(self.frequency_weights[i]), lat)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return all(
            _arr_eq(getattr(self, f), getattr(other, f))
            for f in ("category_ids", "modal_features", "frequency_weights", "latents", "id_effects")
        )


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and np.array_equal(a, b)


def _center_within(v: np.ndarray, cats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Subtract each category's ``weights``-weighted mean."""
    sums = np.bincount(cats, weights=v * weights)
    tot = np.bincount(cats, weights=weights)
    return v - (sums / tot)[cats]


def gen_catalog(
    n_items: int,
    n_clusters: int,
    d_lat: int,
    d_raw: int,
    zipf_exponent: float = 1.0,
    noise_sigma: float = 0.05,
    seed: int = 0,
    id_effect_sigma: float = 1.0,
    id_content_share: float = 0.0,
) -> Catalog:
    """Clustered unit latents, linear-plus-noise modal features, Zipf frequencies.

    Each item also carries a hidden ``id_effect`` with standard deviation
    ``id_effect_sigma``, used by the click model. It has zero
    frequency-weighted mean inside every category, so which category a
    target comes from says nothing about its click effect. A fraction
    ``id_content_share`` of its variance is a linear read-out of the
    latent's within-category deviation along a random direction (content
    that predicts appeal); the rest is item-specific noise.

    Cluster membership is balanced (item ``i`` of a random permutation goes to
    cluster ``i % n_clusters``) and frequency ranks are a second independent
    permutation, so every category spans head and tail items.
    """
    if n_items < 1 or n_clusters < 1 or n_clusters > n_items:
        raise ValueError(f"need 1 <= n_clusters <= n_items, got {n_clusters=}, {n_items=}")
    if d_lat < 2 or d_raw < 2:
        raise ValueError("latent and raw dims must be >= 2")
    if d_raw < d_lat:
        raise ValueError("d_raw must be >= d_lat for a full-rank feature map")
    if noise_sigma < 0 or zipf_exponent < 0 or id_effect_sigma < 0:
        raise ValueError("noise_sigma, zipf_exponent and id_effect_sigma must be non-negative")
    if not 0.0 <= id_content_share <= 1.0:
        raise ValueError("id_content_share must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(n_clusters, d_lat))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    cats = np.empty(n_items, dtype=np.int64)
    cats[rng.permutation(n_items)] = np.arange(n_items) % n_clusters
    lat = centroids[cats] + rng.normal(0.0, noise_sigma, size=(n_items, d_lat))
    lat /= np.linalg.norm(lat, axis=1, keepdims=True)
    mixing = rng.normal(0.0, 1.0 / np.sqrt(d_lat), size=(d_raw, d_lat))
    modal = lat @ mixing.T + rng.normal(0.0, noise_sigma / 2.0, size=(n_items, d_raw))
    ranks = np.empty(n_items, dtype=np.int64)
    ranks[rng.permutation(n_items)] = np.arange(1, n_items + 1)
    freq = ranks.astype(np.float64) ** (-zipf_exponent)
    noise = _center_within(rng.normal(0.0, 1.0, size=n_items), cats, freq)
    id_effects = noise / max(noise.std(), 1e-12)
    if id_content_share > 0:
        appeal = rng.normal(size=d_lat)
        content = _center_within(lat @ (appeal / np.linalg.norm(appeal)), cats, freq)
        content /= max(content.std(), 1e-12)
        id_effects = np.sqrt(1.0 - id_content_share) * id_effects + np.sqrt(id_content_share) * content
    id_effects = id_effects * id_effect_sigma
    return Catalog(
        category_ids=cats,
        modal_features=modal.astype(np.float32),
        frequency_weights=freq,
        latents=lat,
        id_effects=id_effects,
        n_clusters=n_clusters,
    )


# ---------------------------------------------------------------------------
# pre-training triplets


@dataclass
class TripletSample:
    query: np.ndarray
    positive: np.ndarray
    hard_negative: np.ndarray
    positive_item_id: int
    negative_item_id: int


@dataclass
class TripletSet:
    """Column-oriented triplets: <noisy query view, purchased item, same-category negative>."""

    query: np.ndarray
    positive: np.ndarray
    hard_negative: np.ndarray
    positive_item_id: np.ndarray
    negative_item_id: np.ndarray
    n_skipped: int = 0

    def __len__(self) -> int:
        return len(self.positive_item_id)

    def __getitem__(self, i: int) -> TripletSample:
        return TripletSample(
            self.query[i], self.positive[i], self.hard_negative[i],
            int(self.positive_item_id[i]), int(self.negative_item_id[i]),
        )

    def __iter__(self) -> Iterator[TripletSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> "TripletSet":
        return TripletSet(
            self.query[idx], self.positive[idx], self.hard_negative[idx],
            self.positive_item_id[idx], self.negative_item_id[idx],
        )

    def distinct_positives(self) -> "TripletSet":
        """Keep the first triplet for each purchased item."""
        _, first = np.unique(self.positive_item_id, return_index=True)
        return self.subset(np.sort(first))


def _category_members(category_ids: np.ndarray) -> list[np.ndarray]:
    n_cat = int(category_ids.max()) + 1 if len(category_ids) else 0
    order = np.argsort(category_ids, kind="stable")
    bounds = np.searchsorted(category_ids[order], np.arange(n_cat + 1))
    return [order[bounds[c] : bounds[c + 1]] for c in range(n_cat)]


def gen_triplets(
    catalog: Catalog,
    n_samples: int,
    query_noise: float = 0.05,
    seed: int = 0,
    negative_pool: int | None = None,
) -> TripletSet:
    """Draw purchases by frequency; the query is a noisy view of the purchased item.

    The hard negative is another item of the same category, drawn uniformly
    from the ``negative_pool`` members whose latents are closest to the
    purchased item (the whole category when ``None``). Purchases of items
    whose category has no second member are skipped and counted in
    ``n_skipped``.
    """
    if negative_pool is not None and negative_pool < 1:
        raise ValueError("negative_pool must be >= 1 or None")
    if len(catalog) == 0:
        raise ValueError("empty catalog")
    rng = np.random.default_rng(seed)
    p = catalog.frequency_weights / catalog.frequency_weights.sum()
    pos = rng.choice(len(catalog), size=n_samples, p=p)
    members = _category_members(catalog.category_ids)
    sizes = np.array([len(m) for m in members])
    ok = sizes[catalog.category_ids[pos]] >= 2
    n_skipped = int((~ok).sum())
    if n_skipped:
        log.warning("gen_triplets: skipped %d purchases from singleton categories", n_skipped)
    pos = pos[ok]
    neg = np.empty_like(pos)
    u = rng.random(len(pos))
    for c in np.unique(catalog.category_ids[pos]):
        sel = np.flatnonzero(catalog.category_ids[pos] == c)
        mem = members[c]
        slot = np.searchsorted(mem, pos[sel])
        if negative_pool is None or negative_pool >= len(mem) - 1 or catalog.latents is None:
            # uniform over the other members: index into mem with the positive's slot removed
            j = np.minimum((u[sel] * (len(mem) - 1)).astype(np.int64), len(mem) - 2)
            neg[sel] = mem[j + (j >= slot)]
        else:
            lat = catalog.latents[mem]
            sim = lat @ lat.T
            np.fill_diagonal(sim, -np.inf)
            nearest = np.argsort(-sim, axis=1, kind="stable")[:, :negative_pool]
            j = np.minimum((u[sel] * negative_pool).astype(np.int64), negative_pool - 1)
            neg[sel] = mem[nearest[slot, j]]
    feats = catalog.modal_features
    query = feats[pos] + rng.normal(0.0, query_noise, size=(len(pos), feats.shape[1])).astype(np.float32)
    return TripletSet(
        query=query.astype(np.float32),
        positive=feats[pos].copy(),
        hard_negative=feats[neg].copy(),
        positive_item_id=pos,
        negative_item_id=neg,
        n_skipped=n_skipped,
    )


# ---------------------------------------------------------------------------
# impression log


@dataclass
class Impressions:
    user_ids: np.ndarray
    behavior: np.ndarray
    target_item_ids: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    truth: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Impressions":
        truth = {k: v[idx] for k, v in self.truth.items()}
        return Impressions(self.user_ids[idx], self.behavior[idx], self.target_item_ids[idx], self.labels[idx], self.timestamps[idx], truth)

    @property
    def mask(self) -> np.ndarray:
        return self.behavior >= 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Impressions):
            return NotImplemented
        return all(
            _arr_eq(getattr(self, f), getattr(other, f))
            for f in ("user_ids", "behavior", "target_item_ids", "labels", "timestamps")
        )

    def chronological_split(self, day_seconds: int = DAY) -> tuple["Impressions", "Impressions"]:
        """Hold out the last day of timestamps."""
        if len(self) == 0:
            return self, self
        cut = (int(self.timestamps.max()) // day_seconds) * day_seconds
        is_eval = self.timestamps >= cut
        return self.subset(np.flatnonzero(~is_eval)), self.subset(np.flatnonzero(is_eval))


def mean_similarity(latents: np.ndarray, behavior: np.ndarray, targets: np.ndarray, chunk: int = 20000) -> np.ndarray:
    """Mean latent dot product between each target and its non-padded behaviors (0 when empty)."""
    out = np.zeros(len(targets))
    for s in range(0, len(targets), chunk):
        b = behavior[s : s + chunk]
        m = b >= 0
        sims = np.einsum("nld,nd->nl", latents[np.where(m, b, 0)], latents[targets[s : s + chunk]])
        cnt = m.sum(axis=1)
        out[s : s + chunk] = np.where(cnt > 0, (sims * m).sum(axis=1) / np.maximum(cnt, 1), 0.0)
    return out


def _sample_in_clusters(rng, clusters: np.ndarray, members: list[np.ndarray], cdfs: list[np.ndarray]) -> np.ndarray:
    out = np.empty(clusters.shape, dtype=np.int64)
    flat_c = clusters.reshape(-1)
    flat_o = out.reshape(-1)
    u = rng.random(flat_c.size)
    for c in range(len(members)):
        sel = flat_c == c
        if sel.any():
            idx = np.searchsorted(cdfs[c], u[sel] * cdfs[c][-1], side="right")
            flat_o[sel] = members[c][np.minimum(idx, len(members[c]) - 1)]
    return out


def _weighted_cdfs(members: list[np.ndarray], weights: np.ndarray) -> list[np.ndarray]:
    return [np.cumsum(weights[m]) for m in members]


def gen_impressions(
    catalog: Catalog,
    n_users: int,
    n_records: int,
    L_max: int = 50,
    w_id: float = 1.0,
    w_sem: float = 1.0,
    bias: float = -3.3,
    seed: int = 0,
    n_days: int = 5,
    min_seq_len: int = 0,
    pref_concentration: float = 0.3,
    p_target_preferred: float = 0.5,
    cold_fraction: float = 0.0,
    cold_train_scale: float = 0.1,
) -> Impressions:
    """Impression log with Bernoulli clicks from a planted ground-truth model.

    ``P(click) = sigmoid(bias + w_id * id_effect[target] + w_sem * mean_sim)``
    where ``mean_sim`` is the mean latent dot product between the target and
    the behavior items. Users have Dirichlet preferences over clusters; their
    behaviors come from preferred clusters, targets from preferred clusters
    with probability ``p_target_preferred`` and from the whole catalog
    otherwise. With ``cold_fraction > 0`` the least frequent items are drawn
    ``cold_train_scale`` times as often before the final (held-out) day.
    """
    for name, v in (("w_id", w_id), ("w_sem", w_sem), ("bias", bias)):
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite")
    if n_users < 1 or n_records < 0 or L_max < 0 or n_days < 1:
        raise ValueError("invalid impression config")
    if catalog.latents is None or catalog.id_effects is None:
        raise ValueError("impression generation needs the ground-truth catalog")
    if not 0 <= min_seq_len <= L_max:
        raise ValueError("min_seq_len must lie in [0, L_max]")
    rng = np.random.default_rng(seed)
    n_items = len(catalog)
    n_clusters = int(catalog.category_ids.max()) + 1
    members = _category_members(catalog.category_ids)

    ts = np.sort(rng.integers(0, n_days * DAY, size=n_records))
    users = rng.integers(0, n_users, size=n_records)
    prefs = rng.dirichlet(np.full(n_clusters, pref_concentration), size=n_users)
    lengths = rng.integers(min_seq_len, L_max + 1, size=n_records)

    base_w = catalog.frequency_weights.astype(np.float64)
    train_w = base_w.copy()
    if cold_fraction > 0:
        n_cold = int(round(cold_fraction * n_items))
        cold = np.argsort(-base_w, kind="stable")[n_items - n_cold :]
        train_w[cold] *= cold_train_scale
    is_eval = ts >= (n_days - 1) * DAY

    # cluster draws per user, then items within clusters by frequency
    seq_clusters = np.empty((n_records, L_max), dtype=np.int64)
    tgt_pref_cluster = np.empty(n_records, dtype=np.int64)
    order = np.argsort(users, kind="stable")
    bounds = np.searchsorted(users[order], np.arange(n_users + 1))
    for u in range(n_users):
        rows = order[bounds[u] : bounds[u + 1]]
        if len(rows) == 0:
            continue
        draws = rng.choice(n_clusters, size=(len(rows), L_max + 1), p=prefs[u])
        seq_clusters[rows] = draws[:, :L_max]
        tgt_pref_cluster[rows] = draws[:, L_max]

    behavior = np.full((n_records, L_max), PAD, dtype=np.int64)
    targets = np.empty(n_records, dtype=np.int64)
    use_pref = rng.random(n_records) < p_target_preferred
    global_u = rng.random(n_records)
    for split_mask, w in ((~is_eval, train_w), (is_eval, base_w)):
        rows = np.flatnonzero(split_mask)
        if len(rows) == 0:
            continue
        cdfs = _weighted_cdfs(members, w)
        behavior[rows] = _sample_in_clusters(rng, seq_clusters[rows], members, cdfs)
        pref_t = _sample_in_clusters(rng, tgt_pref_cluster[rows], members, cdfs)
        gcdf = np.cumsum(w)
        glob_t = np.minimum(np.searchsorted(gcdf, global_u[rows] * gcdf[-1], side="right"), n_items - 1)
        targets[rows] = np.where(use_pref[rows], pref_t, glob_t)
    behavior[np.arange(L_max)[None, :] >= lengths[:, None]] = PAD

    msim = mean_similarity(catalog.latents, behavior, targets)
    logit = bias + w_id * catalog.id_effects[targets] + w_sem * msim
    prob = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(n_records) < prob).astype(np.int64)
    return Impressions(users, behavior, targets, labels, ts, truth={"mean_sim": msim, "prob": prob})


# ---------------------------------------------------------------------------
# JSONL files


def _write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, separators=(",", ":")))
            f.write("\n")


def _read_jsonl(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(str(path), lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise DatasetFormatError(str(path), lineno, "expected a JSON object")
            missing = [k for k in required if k not in row]
            if missing:
                raise DatasetFormatError(str(path), lineno, f"missing fields {missing}")
            rows.append(row)
    return rows


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a).reshape(-1)]


ITEM_FIELDS = ("item_id", "category_id", "modal_feature", "frequency_weight")
IMPRESSION_FIELDS = ("user_id", "behavior_seq", "target_item_id", "label", "timestamp")
TRUTH_FIELDS = ("item_id", "latent", "id_effect")
TRIPLET_FIELDS = ("query", "positive", "hard_negative", "positive_item_id", "negative_item_id")


def write_items(path, catalog: Catalog) -> None:
    _write_jsonl(path, (
        {
            "item_id": i,
            "category_id": int(catalog.category_ids[i]),
            "modal_feature": _floats(catalog.modal_features[i]),
            "frequency_weight": float(catalog.frequency_weights[i]),
        }
        for i in range(len(catalog))
    ))


def write_ground_truth(path, catalog: Catalog) -> None:
    _write_jsonl(path, (
        {"item_id": i, "latent": _floats(catalog.latents[i]), "id_effect": float(catalog.id_effects[i])}
        for i in range(len(catalog))
    ))


def read_items(path, truth_path=None) -> Catalog:
    rows = _read_jsonl(path, ITEM_FIELDS)
    for expect, r in enumerate(rows):
        if r["item_id"] != expect:
            raise DatasetFormatError(str(path), expect + 1, f"item ids must be dense and ordered; got {r['item_id']}")
    d = len(rows[0]["modal_feature"]) if rows else 0
    cat = Catalog(
        category_ids=np.array([r["category_id"] for r in rows], dtype=np.int64),
        modal_features=np.array([r["modal_feature"] for r in rows], dtype=np.float32).reshape(len(rows), d),
        frequency_weights=np.array([r["frequency_weight"] for r in rows], dtype=np.float64),
    )
    cat.n_clusters = int(cat.category_ids.max()) + 1 if rows else 0
    if truth_path is not None:
        truth = _read_jsonl(truth_path, TRUTH_FIELDS)
        cat.latents = np.array([r["latent"] for r in truth], dtype=np.float64)
        cat.id_effects = np.array([r["id_effect"] for r in truth], dtype=np.float64)
    return cat


def write_impressions(path, imp: Impressions) -> None:
    _write_jsonl(path, (
        {
            "user_id": int(imp.user_ids[i]),
            "behavior_seq": [int(x) for x in imp.behavior[i]],
            "target_item_id": int(imp.target_item_ids[i]),
            "label": int(imp.labels[i]),
            "timestamp": int(imp.timestamps[i]),
        }
        for i in range(len(imp))
    ))


def read_impressions(path, L_max: int | None = None) -> Impressions:
    rows = _read_jsonl(path, IMPRESSION_FIELDS)
    if L_max is None:
        L_max = max((len(r["behavior_seq"]) for r in rows), default=0)
    beh = np.full((len(rows), L_max), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        seq = r["behavior_seq"][:L_max]
        beh[i, : len(seq)] = seq
        if r["label"] not in (0, 1):
            raise DatasetFormatError(str(path), i + 1, f"label must be 0 or 1, got {r['label']!r}")
    return Impressions(
        user_ids=np.array([r["user_id"] for r in rows], dtype=np.int64),
        behavior=beh,
        target_item_ids=np.array([r["target_item_id"] for r in rows], dtype=np.int64),
        labels=np.array([r["label"] for r in rows], dtype=np.int64),
        timestamps=np.array([r["timestamp"] for r in rows], dtype=np.int64),
    )


def write_triplets(path, trip: TripletSet) -> None:
    _write_jsonl(path, (
        {
            "query": _floats(trip.query[i]),
            "positive": _floats(trip.positive[i]),
            "hard_negative": _floats(trip.hard_negative[i]),
            "positive_item_id": int(trip.positive_item_id[i]),
            "negative_item_id": int(trip.negative_item_id[i]),
        }
        for i in range(len(trip))
    ))


def read_triplets(path) -> TripletSet:
    rows = _read_jsonl(path, TRIPLET_FIELDS)
    d = len(rows[0]["query"]) if rows else 0

    def col(k, dtype):
        return np.array([r[k] for r in rows], dtype=dtype)

    return TripletSet(
        query=col("query", np.float32).reshape(len(rows), d),
        positive=col("positive", np.float32).reshape(len(rows), d),
        hard_negative=col("hard_negative", np.float32).reshape(len(rows), d),
        positive_item_id=col("positive_item_id", np.int64),
        negative_item_id=col("negative_item_id", np.int64),
    )
