"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible in
``pytest -v`` output) before asserting. The CTR criteria share one default
dataset, one set of encoder arms and one MAKE pre-training run.
"""
from __future__ import annotations

import contextlib
import io
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from mmrec import cli, config, ctr, make as mk, metrics, retrieval, scl
from mmrec import tensor as T
from mmrec.gradcheck import finite_diff_check
from mmrec.layers import attention_pool, init_attention
from mmrec.simtier import simtier_from_scores
from pipeline_stress import run_stress


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# shared experiment state


@pytest.fixture(scope="module")
def default_run():
    cfg = config.load(None)
    t0 = time.perf_counter()
    data = cli.generate(cfg)
    train, ev = data["impressions"].chronological_split()
    return {"cfg": cfg, "data": data, "train": train, "eval": ev, "gen_time": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def scl_arms(default_run):
    cfg, data = default_run["cfg"], default_run["data"]
    out, t0 = {}, time.perf_counter()
    for arm, overrides in cli.ARMS.items():
        t = time.perf_counter()
        res = scl.pretrain(data["triplets"], replace(cfg.pretrain, **overrides))
        acc = cli.retrieval_metrics(res.state.query, data["triplets_eval"], cfg.eval.acc_n)
        out[arm] = {"acc1": acc["acc1"], "state": res.state, "time": time.perf_counter() - t}
    return {"arms": out, "time": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def ctr_ladder(default_run, scl_arms):
    cfg, data, train, ev = (default_run[k] for k in ("cfg", "data", "train", "eval"))
    t0 = time.perf_counter()
    reps = scl.encode(scl_arms["arms"]["full"]["state"].query, data["catalog"].modal_features)
    mres = mk.make_pretrain(train, reps, cfg.make.epochs, cfg.make, snapshot_epochs=(1, 2))
    world = ctr.World(cfg.data.n_items, cfg.data.n_users, data["catalog"].category_ids, cfg.data.L_max, reps, mres.params)
    ccfg = cfg.ctr.model_config()
    cache: dict = {}
    runs = {v: ctr.train_ctr(train, ev, v, world, ccfg, cache) for v in ("id_base", "simtier", "make", "simtier_make")}
    elapsed = time.perf_counter() - t0 + default_run["gen_time"] + scl_arms["arms"]["full"]["time"]
    return {"runs": runs, "world": world, "make": mres, "ccfg": ccfg, "time": elapsed}


def seed_variant(overrides: list[str], seed: int, mm_variant: str):
    """Full default recipe on a modified config: data, SCL encoder, optional MAKE, id_base and one MM variant."""
    cfg = config.load(None, [*overrides, f"data.seed={seed}"])
    data = cli.generate(cfg)
    train, ev = data["impressions"].chronological_split()
    state = scl.pretrain(data["triplets"], cfg.pretrain).state
    reps = scl.encode(state.query, data["catalog"].modal_features)
    make_params = mk.make_pretrain(train, reps, cfg.make.epochs, cfg.make).params if "make" in mm_variant else None
    world = ctr.World(cfg.data.n_items, cfg.data.n_users, data["catalog"].category_ids, cfg.data.L_max, reps, make_params)
    ccfg, cache = cfg.ctr.model_config(), {}
    base = ctr.train_ctr(train, ev, "id_base", world, ccfg, cache)
    mm = ctr.train_ctr(train, ev, mm_variant, world, ccfg, cache)
    return cfg, train, ev, base, mm


# ---------------------------------------------------------------------------


def test_1_gradients(capsys):
    t0 = time.perf_counter()
    worst = {"scl": 0.0, "din": 0.0, "make": 0.0}
    failed = []
    for seed in range(100):
        rng = np.random.default_rng(seed)

        # SCL total loss, including the learnable temperature
        state = scl.init_encoder(10, hidden=16, d_rep=4, seed=seed)
        xq, xp, xn = (rng.normal(size=(5, 10)) for _ in range(3))
        kp, kn = scl.encode(state.key, xp), scl.encode(state.key, xn)
        bank = unit(rng, 8, 4)
        pcfg = scl.PretrainConfig(hidden=16, d_rep=4, batch_size=5, bank_size=8)
        params = {**state.query, "log_tau": np.array(math.log(rng.uniform(0.05, 1.0)))}
        rep = finite_diff_check(lambda g: scl.total_loss_graph(g, xq, kp, kn, bank, pcfg), params, seed=seed, max_coords=12)
        worst["scl"] = max(worst["scl"], rep.max_rel_err)
        if not rep.passed:
            failed.append(("scl", seed, rep.failures[:2]))

        # DIN target attention
        p = {}
        init_attention(rng, p, "din", 4, 5)
        p = {k: v.astype(np.float64) for k, v in p.items()}
        seq, tgt = unit(rng, 3, 6, 4), unit(rng, 3, 4)
        mask = rng.random((3, 6)) < 0.7
        mask[:, 0] = True
        w = rng.normal(size=(3, 4))

        def din_loss(g):
            pooled, _ = attention_pool(g, "din", g.constant(seq), mask, g.constant(tgt))
            return T.reduce_sum(pooled * g.constant(w))

        rep = finite_diff_check(din_loss, p, seed=seed, max_coords=12)
        worst["din"] = max(worst["din"], rep.max_rel_err)
        if not rep.passed:
            failed.append(("din", seed, rep.failures[:2]))

        # MAKE end to end
        mcfg = mk.MakeConfig(att_hidden=5, widths=(6, 5, 4, 1))
        mp = {k: v.astype(np.float64) for k, v in mk.init_make(4, mcfg, seed=seed).items()}
        mseq, mtgt = unit(rng, 4, 5, 4), unit(rng, 4, 4)
        mmask = rng.random((4, 5)) < 0.7
        mmask[:, 0] = True
        y = rng.integers(0, 2, 4).astype(np.float64)

        def make_loss(g):
            logits, _, _ = mk.make_graph(g, g.constant(mseq), mmask, g.constant(mtgt))
            return T.reduce_mean(T.sigmoid_cross_entropy(logits, y))

        rep = finite_diff_check(make_loss, mp, seed=seed, max_coords=12)
        worst["make"] = max(worst["make"], rep.max_rel_err)
        if not rep.passed:
            failed.append(("make", seed, rep.failures[:2]))
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    verdict(capsys, 1, ok, f"max rel err scl={worst['scl']:.2e} din={worst['din']:.2e} make={worst['make']:.2e}; {elapsed:.1f}s")
    assert not failed, failed[:3]
    assert elapsed < 60


def test_2_closed_forms(capsys):
    checks = {}
    e = np.eye(4)
    for fill in (1, 5, 64, 4096):
        bank = scl.MemoryBank(4096, 4)
        bank.enqueue(np.tile(e[1], (fill, 1)))
        checks[f"infonce fill={fill}"] = abs(scl.infonce_loss(e[0], e[2], bank, 0.07) - math.log(fill + 1)) < 1e-6
    y = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
    checks["make_loss(0,y)"] = abs(mk.make_loss(np.zeros(5), y) - math.log(2)) < 1e-7
    rng = np.random.default_rng(0)
    key = {"w": rng.normal(size=(5, 3)).astype(np.float32), "b": rng.normal(size=3).astype(np.float32)}
    query = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in key.items()}
    checks["momentum m=1"] = all(scl.momentum_update(key, query, 1.0)[k].tobytes() == key[k].tobytes() for k in key)
    checks["momentum m=0"] = all(scl.momentum_update(key, query, 0.0)[k].tobytes() == query[k].tobytes() for k in key)
    ok = all(checks.values())
    verdict(capsys, 2, ok, ", ".join(f"{k}:{'ok' if v else 'bad'}" for k, v in checks.items()))
    assert ok, checks


def interval_scan_batch(scores, mask, n):
    """Naive tier oracle: test membership of every left-open interval (2t/N-1, 2(t+1)/N-1]; -1 joins tier 0."""
    s = np.clip(scores, -1.0, 1.0)
    out = np.zeros((len(s), n), dtype=np.int64)
    for t in range(n):
        lo, hi = (2.0 * t - n) / n, (2.0 * (t + 1) - n) / n
        inside = ((s > lo) & (s <= hi)) | ((t == 0) & (s == -1.0))
        out[:, t] = (inside & mask).sum(axis=1)
    return out


def test_3_oracles(capsys):
    rng = np.random.default_rng(0)
    simtier_bad = 0
    for _ in range(0, 100_000, 1000):
        n, L = int(rng.integers(1, 51)), int(rng.integers(0, 201))
        scores = rng.uniform(-1.05, 1.05, size=(1000, L))
        if L:
            edges = (2.0 * np.arange(n + 1) - n) / n
            pick = rng.random(scores.shape) < 0.1
            scores[pick] = rng.choice(edges, size=int(pick.sum()))
        mask = rng.random((1000, L)) < 0.8
        simtier_bad += int((simtier_from_scores(scores, mask, n) != interval_scan_batch(scores, mask, n)).any(axis=1).sum())

    auc_err = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.normal(size=n) if i % 2 else rng.integers(0, 6, n).astype(float)
        pos, neg = s[y == 1], s[y == 0]
        oracle = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (len(pos) * len(neg))
        auc_err = max(auc_err, abs(metrics.auc(s, y) - oracle))

    topn_bad = 0
    for _ in range(1000):
        corpus, q = rng.normal(size=(200, 8)), rng.normal(size=8)
        n = int(rng.integers(1, 20))
        topn_bad += not np.array_equal(retrieval.top_n(q, corpus, n), np.argsort(-(corpus @ q), kind="stable")[:n])

    ok = simtier_bad == 0 and auc_err < 1e-9 and topn_bad == 0
    verdict(capsys, 3, ok, f"simtier mismatches={simtier_bad}/100000, auc max|d|={auc_err:.1e}, top_n mismatches={topn_bad}/1000")
    assert ok


def test_4_table2_ordering(capsys, scl_arms):
    acc = {arm: r["acc1"] for arm, r in scl_arms["arms"].items()}
    order = acc["full"] > acc["no_triplet"] > acc["no_triplet_moco"] > acc["untrained"]
    ok = order and acc["full"] >= 0.9 and scl_arms["time"] <= 300
    verdict(capsys, 4, ok, ", ".join(f"{a}={v:.4f}" for a, v in acc.items()) + f"; {scl_arms['time']:.0f}s")
    assert acc["full"] >= 0.9
    assert scl_arms["time"] <= 300
    assert order, acc


def test_5_table3_ordering(capsys, ctr_ladder, default_run):
    g = {v: r.metrics["gauc"] for v, r in ctr_ladder["runs"].items()}
    ev = default_run["eval"]
    truth = metrics.gauc(ev.truth["prob"], ev.labels, ev.user_ids)
    id_only = metrics.gauc(default_run["data"]["catalog"].id_effects[ev.target_item_ids], ev.labels, ev.user_ids)
    lift = g["simtier_make"] - g["id_base"]
    order = g["simtier_make"] > max(g["simtier"], g["make"]) > g["id_base"]
    ok = order and lift >= 0.005 and truth - id_only >= 0.02 and ctr_ladder["time"] <= 600
    verdict(capsys, 5, ok, ", ".join(f"{v}={x:.4f}" for v, x in g.items())
            + f"; lift={lift:.4f}; headroom={truth - id_only:.4f}; {ctr_ladder['time']:.0f}s")
    assert truth - id_only >= 0.02
    assert order, g
    assert lift >= 0.005
    assert ctr_ladder["time"] <= 600


def test_6_negative_control(capsys):
    # read as: mean GAUC over 3 seeds; per-seed gaps are printed alongside
    g_base, g_mm = [], []
    for seed in (0, 1, 2):
        *_, base, mm = seed_variant(["data.w_sem=0"], seed, "simtier")
        g_base.append(base.metrics["gauc"])
        g_mm.append(mm.metrics["gauc"])
    gap = float(np.mean(g_mm) - np.mean(g_base))
    ok = abs(gap) < 0.003
    per_seed = ", ".join(f"{m - b:+.4f}" for m, b in zip(g_mm, g_base))
    verdict(capsys, 6, ok, f"3-seed mean GAUC(simtier)-GAUC(id_base) at w_sem=0: {gap:+.5f} (per seed: {per_seed})")
    assert ok, (g_base, g_mm)


def test_7_make_epochs(capsys, default_run, ctr_ladder):
    cfg, train, ev = default_run["cfg"], default_run["train"], default_run["eval"]
    world, ccfg, snaps = ctr_ladder["world"], ctr_ladder["ccfg"], ctr_ladder["make"].snapshots
    g = {0: ctr.train_ctr(train, ev, "make", replace(world, make_params=None), replace(ccfg, make_trainable=True)).metrics["gauc"]}
    for e in (1, 2):
        g[e] = ctr.train_ctr(train, ev, "make", replace(world, make_params=snaps[e]), ccfg).metrics["gauc"]
    # the ladder's make run used the final (epoch 4) parameters of the same pre-training run
    assert cfg.make.epochs == 4
    g[4] = ctr_ladder["runs"]["make"].metrics["gauc"]
    steps = [g[b] - g[a] for a, b in ((0, 1), (1, 2), (2, 4))]
    ok = all(s >= -0.002 for s in steps) and g[4] - g[0] >= 0.003
    verdict(capsys, 7, ok, ", ".join(f"e{e}={x:.4f}" for e, x in g.items()) + f"; e4-e0={g[4] - g[0]:+.4f}")
    assert ok, g


def test_8_frequency_buckets(capsys):
    pairs = []
    for seed in (0, 1, 2):
        cfg, train, ev, base, mm = seed_variant(["data.cold_fraction=0.125"], seed, "simtier_make")
        rows = ctr.freq_bucket_eval(train, ev, base.eval_probs, mm.eval_probs, cfg.data.n_items, cfg.eval.n_buckets)
        pairs.append((rows[0]["rel_auc_improvement"], rows[-1]["rel_auc_improvement"]))
    ok = all(lo is not None and hi is not None and lo >= hi for lo, hi in pairs)
    verdict(capsys, 8, ok, "bucket1 vs bucket8 relative AUC lift: " + ", ".join(f"{lo:.4f}>={hi:.4f}" for lo, hi in pairs))
    assert ok, pairs


def test_9_pipeline(capsys):
    encoder = scl.init_encoder(16, hidden=16, d_rep=8, seed=0).query
    out = run_stress(encoder, n_events=10_000, producers=4, workers=2, readers=4)
    fresh = {}
    from mmrec.pipeline import ItemEvent, Pipeline

    with Pipeline(encoder, encode_delay=0.005) as p:
        p.ingest(ItemEvent(0, np.ones(16, np.float32))).wait(5)
        fresh = p.freshness_report()
    fresh_ok = fresh["p50"] == fresh["p95"] == fresh["max"] and 0.005 <= fresh["max"] <= 0.05
    ok = out.ok and out.n_reads > 0 and fresh_ok
    verdict(capsys, 9, ok, f"{out.n_events} events, {out.n_dead} dead-lettered, {out.n_reads} audited reads, "
            f"{len(out.violations)} violations; 5ms encode -> max latency {fresh['max'] * 1000:.2f}ms")
    assert out.violations == []
    assert fresh_ok, fresh


SMALL = {
    "data": {"n_items": 80, "n_clusters": 5, "d_lat": 4, "d_raw": 16, "n_triplets": 500, "n_eval_triplets": 100,
             "n_users": 40, "n_records": 3000, "L_max": 8, "n_days": 3, "bias": -1.0},
    "pretrain": {"batch_size": 32, "epochs": 2, "bank_size": 64, "hidden": 16, "d_rep": 8},
    "make": {"epochs": 2, "batch_size": 128},
    "ctr": {"d_id": 4, "att_hidden": 8, "head": [16, 1], "batch_size": 128, "sweep_epochs": 2},
    "eval": {"n_buckets": 4},
}


def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    assert code == 0, err.getvalue()


def _full_study(root):
    (root / "config.json").write_text(json.dumps(SMALL))
    c = ("--config", root / "config.json")
    data, runs = root / "data", root / "runs"
    enc = runs / "pretrain/full/encoder_epoch2.mmt"
    _cli("gen-data", *c, "--out", data)
    _cli("pretrain", *c, "--data", data, "--out", runs / "pretrain", "--arm", "all")
    _cli("eval-retrieval", *c, "--data", data, "--checkpoint", enc, "--encoder-id", "full2", "--out", runs / "retrieval.json")
    _cli("make-pretrain", *c, "--data", data, "--encoder", enc, "--out", runs / "make")
    _cli("train-ctr", *c, "--data", data, "--encoder", enc, "--make", runs / "make/make.mmt", "--out", runs / "ctr")
    _cli("train-ctr", *c, "--data", data, "--encoder", enc, "--variant", "simtier_make", "--encoder-id", "full2", "--tag", "full2",
         "--make", runs / "make/make.mmt", "--out", runs / "corr")
    for e in (0, 1):
        _cli("train-ctr", *c, "--data", data, "--encoder", enc, "--variant", "make", "--make-epochs", e, "--tag", f"e{e}", "--out", runs / "study")
    _cli("epoch-sweep", *c, "--data", data, "--encoder", enc, "--out", runs / "sweep")
    _cli("report", "--runs", runs, "--out", root / "report")


def test_10_determinism(capsys, tmp_path):
    roots = [tmp_path / "a", tmp_path / "b"]
    for r in roots:
        r.mkdir()
        _full_study(r)
    files = sorted(p.relative_to(roots[0]) for p in roots[0].rglob("*") if p.is_file())
    differ = [str(f) for f in files if (roots[0] / f).read_bytes() != (roots[1] / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".mmt" for f in files)
    n_csv = sum(f.suffix == ".csv" for f in files)
    ok = not differ and n_ckpt > 0 and n_csv >= 6
    verdict(capsys, 10, ok, f"{len(files)} files compared ({n_ckpt} checkpoints, {n_csv} CSVs); {len(differ)} differ")
    assert ok, differ
