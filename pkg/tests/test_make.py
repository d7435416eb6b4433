from __future__ import annotations

import math

import numpy as np
import pytest

from mmrec import make as mk
from mmrec import synthdata as sd
from mmrec import tensor as T
from mmrec.gradcheck import finite_diff_check
from mmrec.layers import attention_pool


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(np.float32)


D = 8


@pytest.fixture(scope="module")
def params():
    return mk.init_make(D, seed=3)


class TestAttention:
    def test_single_item(self, params):
        rng = np.random.default_rng(0)
        v = unit(rng, 1, D)
        pooled, w = mk.din_attention(params, v, None, unit(rng, D))
        np.testing.assert_array_equal(pooled, v[0])
        assert w[0] == 1.0

    def test_identical_items(self, params):
        rng = np.random.default_rng(1)
        u = unit(rng, D)
        pooled, _ = mk.din_attention(params, np.tile(u, (6, 1)), None, unit(rng, D))
        np.testing.assert_allclose(pooled, u, atol=1e-6)

    def test_weights_normalised_and_padding_zero(self, params):
        rng = np.random.default_rng(2)
        seq = unit(rng, 16, 9, D)
        mask = rng.random((16, 9)) < 0.6
        mask[:, 0] = True
        mask[3] = False
        _, w = mk.din_attention(params, seq, mask, unit(rng, 16, D))
        assert np.all(w[~mask] == 0.0)
        live = mask.any(axis=1)
        np.testing.assert_allclose(w[live].sum(axis=1), 1.0, atol=1e-6)

    def test_empty_sequence_pools_to_zero(self, params):
        rng = np.random.default_rng(3)
        pooled, _ = mk.din_attention(params, unit(rng, 4, D), np.zeros(4, bool), unit(rng, D))
        np.testing.assert_array_equal(pooled, 0.0)

    def test_dim_mismatch(self, params):
        with pytest.raises(ValueError):
            mk.din_attention(params, np.ones((3, D)), None, np.ones(D + 1))

    def test_attention_gradients(self):
        rng = np.random.default_rng(4)
        p = {k: v.astype(np.float64) for k, v in mk.init_make(4, mk.MakeConfig(att_hidden=6), seed=1).items() if ".att" in k}
        seq, tgt = unit(rng, 3, 5, 4), unit(rng, 3, 4)
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], bool)
        w = rng.normal(size=(3, 4))

        def loss(g):
            pooled, _ = attention_pool(g, "make.att", g.constant(seq), mask, g.constant(tgt))
            return T.reduce_sum(pooled * g.constant(w))

        rep = finite_diff_check(loss, p, seed=0)
        assert rep.passed, rep.failures


class TestForward:
    def test_zero_last_layer(self, params):
        rng = np.random.default_rng(5)
        p = dict(params)
        p["make.mlp3.w"] = np.zeros_like(p["make.mlp3.w"])
        p["make.mlp3.b"] = np.zeros_like(p["make.mlp3.b"])
        logit, _ = mk.make_forward(p, unit(rng, 7, D), None, unit(rng, D))
        assert logit == 0.0
        assert 1.0 / (1.0 + math.exp(-logit)) == 0.5

    def test_hidden_width(self, params):
        rng = np.random.default_rng(6)
        _, hidden = mk.make_forward(params, unit(rng, 7, D), None, unit(rng, D))
        assert hidden.shape == (112,) == (mk.hidden_width(),)
        assert mk.knowledge_width(D) == D + 112

    def test_batch_matches_single(self, params):
        rng = np.random.default_rng(7)
        seq, tgt = unit(rng, 10, 6, D), unit(rng, 10, D)
        mask = rng.random((10, 6)) < 0.7
        logits, hidden = mk.make_forward(params, seq, mask, tgt)
        for i in range(10):
            l1, h1 = mk.make_forward(params, seq[i], mask[i], tgt[i])
            assert abs(l1 - logits[i]) < 1e-6
            np.testing.assert_allclose(h1, hidden[i], atol=1e-6)

    def test_four_layers(self, params):
        assert sorted(k for k in params if k.endswith(".w") and "mlp" in k) == [f"make.mlp{i}.w" for i in range(4)]
        assert params["make.mlp3.w"].shape[1] == 1
        with pytest.raises(ValueError):
            mk.MakeConfig(widths=(32, 16, 1))


class TestLoss:
    def test_zero_logit(self):
        assert abs(mk.make_loss([0.0], [1]) - math.log(2)) < 1e-7
        assert abs(mk.make_loss([0.0], [0]) - math.log(2)) < 1e-7

    def test_limit(self):
        assert mk.make_loss([20.0], [1]) < 1e-8

    def test_naive_formula(self):
        for z in range(-3, 4):
            for y in (0, 1):
                s = 1.0 / (1.0 + math.exp(-z))
                naive = -y * math.log(s) - (1 - y) * math.log(1 - s)
                assert abs(mk.make_loss([float(z)], [y]) - naive) < 1e-7

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(8)
        cfg = mk.MakeConfig(att_hidden=5, widths=(6, 5, 4, 1))
        p = {k: v.astype(np.float64) for k, v in mk.init_make(4, cfg, seed=2).items()}
        seq, tgt = unit(rng, 4, 5, 4), unit(rng, 4, 4)
        mask = rng.random((4, 5)) < 0.7
        mask[:, 0] = True
        y = np.array([0.0, 1.0, 1.0, 0.0])

        def loss(g):
            logits, _, _ = mk.make_graph(g, g.constant(seq), mask, g.constant(tgt))
            return T.reduce_mean(T.sigmoid_cross_entropy(logits, y))

        rep = finite_diff_check(loss, p, seed=0)
        assert rep.passed, rep.failures


def _toy_log(n=3000, seed=0):
    """Separable toy log: each row's behaviours come from one half of the catalog; that half is the label."""
    rng = np.random.default_rng(seed)
    reps = unit(rng, 40, D)
    reps[:20, 0] = np.abs(reps[:20, 0]) + 1.0
    reps[20:, 0] = -np.abs(reps[20:, 0]) - 1.0
    reps /= np.linalg.norm(reps, axis=1, keepdims=True)
    half = rng.integers(0, 2, size=n)
    beh = rng.integers(0, 20, size=(n, 5)) + 20 * (1 - half[:, None])
    beh[:, 1:][rng.random((n, 4)) < 0.3] = sd.PAD
    tgt = rng.integers(0, 40, size=n)
    labels = half.astype(np.int64)
    imp = sd.Impressions(rng.integers(0, 30, n), beh, tgt, labels, np.arange(n))
    return reps, imp


class TestPretrain:
    def test_zero_epochs(self):
        reps, imp = _toy_log()
        res = mk.make_pretrain(imp, reps, 0)
        init = mk.init_make(D)
        assert all(np.array_equal(res.params[k], init[k]) for k in init)

    def test_loss_non_increasing_on_separable_log(self):
        reps, imp = _toy_log()
        res = mk.make_pretrain(imp, reps, 5, mk.MakeConfig(lr=5e-3), eval_set=imp)
        losses = [r["train_loss"] for r in res.epochs]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert res.epochs[-1]["auc"] > 0.99

    def test_deterministic_and_snapshots(self):
        reps, imp = _toy_log()
        a = mk.make_pretrain(imp, reps, 3, snapshot_epochs=(0, 1, 3))
        b = mk.make_pretrain(imp, reps, 1)
        assert all(np.array_equal(a.params[k], a.snapshots[3][k]) for k in a.params)
        assert all(np.array_equal(b.params[k], a.snapshots[1][k]) for k in b.params)
        init = mk.init_make(D)
        assert all(np.array_equal(init[k], a.snapshots[0][k]) for k in init)

    def test_missing_rep_named(self):
        reps, imp = _toy_log()
        with pytest.raises(KeyError, match="item 39"):
            mk.make_pretrain(imp, reps[:39], 1)
        bad = reps.copy()
        bad[7] = np.nan
        with pytest.raises(KeyError, match="item 7"):
            mk.make_pretrain(imp, bad, 1)


class TestKnowledge:
    def test_frozen_and_repeatable(self, params):
        rng = np.random.default_rng(9)
        seq, tgt = unit(rng, 5, D), unit(rng, D)
        before = {k: v.tobytes() for k, v in params.items()}
        first = mk.extract_knowledge(params, seq, None, tgt)
        for _ in range(1000):
            kv = mk.extract_knowledge(params, seq, None, tgt)
        assert {k: v.tobytes() for k, v in params.items()} == before
        np.testing.assert_array_equal(kv.vector, first.vector)
        assert kv.vector.shape == (D + 112,)
        assert np.all(np.isfinite(kv.vector))

    def test_table_matches_rows(self, params):
        reps, imp = _toy_log(50)
        table = mk.knowledge_table(params, reps, imp, batch_size=16)
        assert table.shape == (50, D + 112)
        for i in (0, 17, 49):
            kv = mk.extract_knowledge(params, mk.gather_reps(reps, imp.behavior[i]), imp.mask[i], reps[imp.target_item_ids[i]])
            np.testing.assert_allclose(table[i], kv.vector, atol=1e-6)
