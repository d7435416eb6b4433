from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmrec import checkpoint
from mmrec import tensor as T
from mmrec.gradcheck import finite_diff_check
from mmrec.optim import Adam
from mmrec.tensor import OPS, Graph, Op


def _weighted(g: Graph, out: T.Tensor, rng) -> T.Tensor:
    w = g.constant(rng.normal(size=out.shape))
    return T.reduce_sum(out * w)


# (params, loss builder) for each registered op; builders take (graph, rng)
def _cases(seed: int):
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    ids = rng.integers(-1, 5, size=(3, 4))
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    return {
        "add": ({"a": n(3, 4), "b": n(4)}, lambda g, r: _weighted(g, g.param("a") + g.param("b"), r)),
        "sub": ({"a": n(3, 1), "b": n(3, 4)}, lambda g, r: _weighted(g, g.param("a") - g.param("b"), r)),
        "mul": ({"a": n(2, 3, 4), "b": n(3, 1)}, lambda g, r: _weighted(g, g.param("a") * g.param("b"), r)),
        "matmul": ({"a": n(2, 3, 4), "b": n(4, 5)}, lambda g, r: _weighted(g, g.param("a") @ g.param("b"), r)),
        "transpose": ({"a": n(3, 4)}, lambda g, r: _weighted(g, T.transpose(g.param("a")), r)),
        "concat": ({"a": n(3, 2), "b": n(3, 4)}, lambda g, r: _weighted(g, T.concat([g.param("a"), g.param("b")], axis=1), r)),
        "embedding": ({"t": n(5, 3)}, lambda g, r: _weighted(g, T.embedding(g.param("t"), ids), r)),
        "relu": ({"x": n(4, 5)}, lambda g, r: _weighted(g, T.relu(g.param("x")), r)),
        "prelu": ({"x": n(4, 5), "al": n(5)}, lambda g, r: _weighted(g, T.prelu(g.param("x"), g.param("al")), r)),
        "sigmoid": ({"x": n(4, 5)}, lambda g, r: _weighted(g, T.sigmoid(g.param("x")), r)),
        "exp": ({"x": n(4, 5)}, lambda g, r: _weighted(g, T.exp(g.param("x")), r)),
        "log": ({"x": rng.uniform(0.5, 2.0, (4, 5))}, lambda g, r: _weighted(g, T.log(g.param("x")), r)),
        "softmax": ({"x": n(3, 6)}, lambda g, r: _weighted(g, T.softmax(g.param("x")), r)),
        "softmax_masked": ({"x": n(3, 6)}, lambda g, r: _weighted(g, T.softmax(g.param("x"), mask=mask), r)),
        "l2_normalize": ({"x": n(4, 5)}, lambda g, r: _weighted(g, T.l2_normalize(g.param("x")), r)),
        "dot": ({"a": n(4, 5), "b": n(4, 5)}, lambda g, r: _weighted(g, T.dot(g.param("a"), g.param("b")), r)),
        "reduce_sum": ({"x": n(3, 4, 5)}, lambda g, r: _weighted(g, T.reduce_sum(g.param("x"), axis=1), r)),
        "reshape": ({"x": n(3, 4)}, lambda g, r: _weighted(g, T.reshape(g.param("x"), (2, 6)), r)),
        "sigmoid_cross_entropy": (
            {"z": 3 * n(6)},
            lambda g, r: T.reduce_sum(T.sigmoid_cross_entropy(g.param("z"), (np.arange(6) % 2).astype(float))),
        ),
        "softmax_cross_entropy": (
            {"z": 2 * n(4, 5)},
            lambda g, r: T.reduce_mean(T.softmax_cross_entropy(g.param("z"), np.array([0, 3, 1, 4]))),
        ),
    }


def _check(name: str, seed: int, **kw):
    params, build = _cases(seed)[name]
    return finite_diff_check(lambda g: build(g, np.random.default_rng(seed + 1000)), params, seed=seed, **kw)


class TestGradients:
    def test_every_registered_op_has_a_case(self):
        covered = {k.replace("_masked", "") for k in _cases(0)}
        assert set(OPS) <= covered

    @pytest.mark.parametrize("name", sorted(_cases(0)))
    def test_op_passes_finite_differences_on_100_seeds(self, name):
        worst = 0.0
        for seed in range(100):
            rep = _check(name, seed, tol=1e-4)
            assert rep.passed, (seed, rep.failures[:3])
            worst = max(worst, rep.max_rel_err)
        assert worst < 1e-4

    def test_linear_model_is_essentially_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=7)
        rep = finite_diff_check(lambda g: T.dot(g.param("w"), g.constant(x)), {"w": rng.normal(size=7)}, max_coords=None)
        assert rep.passed
        assert rep.max_rel_err < 1e-8

    def test_softmax_cross_entropy_network(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 6))
        target = rng.integers(0, 3, size=8)

        def loss(g):
            h = T.relu(g.constant(x) @ g.param("w0") + g.param("b0"))
            return T.reduce_mean(T.softmax_cross_entropy(h @ g.param("w1"), target))

        params = {"w0": rng.normal(size=(6, 5)), "b0": rng.normal(size=5) * 0.1, "w1": rng.normal(size=(5, 3))}
        assert finite_diff_check(loss, params, tol=1e-4).passed

    def test_corrupted_backward_rule_is_caught(self, monkeypatch):
        good = OPS["sigmoid"]
        broken = Op("sigmoid", good.forward, lambda ctx, g: tuple(1.5 * x for x in good.backward(ctx, g)))
        monkeypatch.setitem(OPS, "sigmoid", broken)
        rep = _check("sigmoid", 0)
        assert not rep.passed
        assert rep.failures

    def test_relu_kink_probes_are_skipped_not_failed(self):
        params = {"x": np.array([1e-7, -1e-7, 0.5, -0.5])}
        rep = finite_diff_check(lambda g: T.reduce_sum(T.relu(g.param("x"))), params, h=1e-5)
        assert rep.passed
        assert rep.n_kink_skipped == 2
        assert rep.n_checked == 2

    def test_unused_parameter_gets_zero_gradient(self):
        g = Graph({"a": np.ones(3), "b": np.ones(2)})
        grads = g.backward(T.reduce_sum(g.param("a") * 2.0))
        np.testing.assert_array_equal(grads["a"], 2.0)
        np.testing.assert_array_equal(grads["b"], 0.0)

    def test_shared_input_accumulates(self):
        g = Graph({"a": np.array([3.0])})
        a = g.param("a")
        grads = g.backward(T.reduce_sum(a * a + a))
        np.testing.assert_allclose(grads["a"], [7.0])

    def test_frozen_parameters_receive_no_gradient(self):
        g = Graph({"a": np.ones(3), "k": np.ones(3)}, frozen=["k"])
        grads = g.backward(T.reduce_sum(g.param("a") * g.param("k")))
        np.testing.assert_array_equal(grads["k"], 0.0)
        np.testing.assert_array_equal(grads["a"], 1.0)

    def test_backward_consumes_tape(self):
        g = Graph({"a": np.ones((64, 64))})
        loss = T.reduce_sum(T.relu(g.param("a") @ g.param("a")))
        assert g.nodes
        g.backward(loss)
        assert g.nodes == []
        with pytest.raises(RuntimeError, match="consumed"):
            g.backward(loss)

    def test_activations_freed_without_cycle_collector(self):
        import gc
        import weakref

        gc.disable()
        try:
            g = Graph({"a": np.ones((8, 8))})
            h = g.param("a") @ g.param("a")
            loss = T.reduce_sum(T.sigmoid(h))
            ref = weakref.ref(h.data)
            g.backward(loss)
            del h, loss
            assert ref() is None
        finally:
            gc.enable()


finite = dict(allow_nan=False, allow_infinity=False)


class TestNumericContracts:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-30, 30, **finite)))
    def test_softmax_rows_sum_to_one(self, x):
        y = T.softmax(Graph(record=False).constant(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(y > 0) and np.all(y <= 1)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-1e3, 1e3, **finite)))
    def test_l2_normalize_gives_unit_rows(self, x):
        if np.any(np.linalg.norm(x, axis=-1) < 1e-6):
            return
        y = T.l2_normalize(Graph(record=False).constant(x)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-6)

    def test_l2_normalize_rejects_zero_vector(self):
        with pytest.raises(T.DegenerateNormError):
            T.l2_normalize(Graph().constant(np.zeros((2, 3))))

    def test_masked_softmax_zero_on_padding(self):
        g = Graph(record=False)
        mask = np.array([[True, False, True], [False, False, False]])
        y = T.softmax(g.constant(np.array([[1.0, 50.0, 2.0], [1.0, 2.0, 3.0]])), mask=mask).data
        assert y[0, 1] == 0.0
        np.testing.assert_allclose(y[0].sum(), 1.0, atol=1e-6)
        np.testing.assert_array_equal(y[1], 0.0)

    def test_softmax_tiny_probabilities_flush_to_zero(self):
        y = T.softmax(Graph(record=False).constant(np.array([[0.0, -200.0]]))).data
        assert y[0, 1] == 0.0
        assert y.dtype == np.float32

    def test_shape_mismatch_raises(self):
        g = Graph()
        with pytest.raises(T.ShapeError):
            g.constant(np.ones((2, 3))) @ g.constant(np.ones((2, 3)))
        with pytest.raises(T.ShapeError):
            g.constant(np.ones((2, 3))) + g.constant(np.ones(4))

    def test_non_finite_forward_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.exp(Graph().constant(np.array([1e4])))

    def test_embedding_padding_rows_are_zero(self):
        g = Graph(record=False)
        out = T.embedding(g.constant(np.arange(6.0).reshape(3, 2)), np.array([2, -1, 0])).data
        np.testing.assert_array_equal(out, [[4, 5], [0, 0], [0, 1]])

    def test_loss_must_be_scalar(self):
        g = Graph({"a": np.ones(3)})
        with pytest.raises(ValueError):
            g.backward(g.param("a") * 2.0)

    def test_training_storage_is_float32(self):
        g = Graph({"a": np.ones(3, dtype=np.float64)})
        assert g.param("a").data.dtype == np.float32


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        Adam(lr=0.1).step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": np.zeros((2, 3), dtype=np.float32)}
        Adam(lr=0.1).step(p, {"w": np.ones((2, 3))})
        np.testing.assert_allclose(p["w"], -0.1, rtol=1e-6)

    def test_matches_hand_recurrence(self):
        rng = np.random.default_rng(0)
        gs = rng.normal(size=(5, 4))
        p = {"w": np.zeros(4, dtype=np.float32)}
        opt = Adam(lr=0.01)
        m = v = np.zeros(4)
        w = np.zeros(4)
        for t, g in enumerate(gs, 1):
            opt.step(p, {"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-5, atol=1e-7)

    def test_deterministic(self):
        def run():
            p = {"w": np.ones(3, dtype=np.float32)}
            opt = Adam(lr=0.05)
            for g in np.random.default_rng(1).normal(size=(4, 3)):
                opt.step(p, {"w": g})
            return p["w"]

        assert run().tobytes() == run().tobytes()

    def test_missing_gradient(self):
        with pytest.raises(KeyError, match="missing gradient"):
            Adam().step({"w": np.ones(2, dtype=np.float32), "b": np.ones(1, dtype=np.float32)}, {"w": np.ones(2)})

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"w": np.ones(2, dtype=np.float32)}, {"w": np.ones(3)})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"b": rng.normal(size=3).astype(np.float32), "a.w": rng.normal(size=(2, 4)).astype(np.float32), "s": np.float32(0.5)}
        checkpoint.save(tmp_path / "c.mmt", params, {"epoch": 3})
        back, meta = checkpoint.load(tmp_path / "c.mmt")
        assert meta == {"epoch": 3}
        assert set(back) == set(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])
            assert back[k].shape == np.shape(params[k])

    def test_layout(self):
        blob = checkpoint.dumps({"x": np.array([1.0, 2.0], dtype=np.float32)})
        assert blob[:8] == b"MMRECTNS"
        hlen = int.from_bytes(blob[8:16], "little")
        assert blob[16 + hlen :] == np.array([1.0, 2.0], dtype="<f4").tobytes()

    def test_equal_params_equal_bytes(self):
        a = {"x": np.ones(3), "y": np.zeros(2)}
        b = {"y": np.zeros(2), "x": np.ones(3)}
        assert checkpoint.dumps(a) == checkpoint.dumps(b)

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"NOTMAGIC" + bytes(8))

    def test_truncated_payload(self):
        blob = checkpoint.dumps({"x": np.ones(10)})
        with pytest.raises(checkpoint.CheckpointError, match="truncated"):
            checkpoint.loads(blob[:-4])
