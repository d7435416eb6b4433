"""Dense tensors and a recording tape for reverse-mode differentiation.

Every op lives in the ``OPS`` registry as a forward/backward pair, so a test
can swap a backward rule for a broken one and watch the gradient checker
catch it. A :class:`Graph` is a per-computation tape: it binds named
parameters, records op applications in creation order (which is already a
topological order) and walks them backwards in :func:`backward`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Inputs to an op are not conformable."""

    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class DegenerateNormError(ValueError):
    """l2_normalize was asked to normalize a (near) zero vector."""


@dataclass
class Op:
    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[[dict, np.ndarray], tuple]
    has_kink: bool = False


OPS: dict[str, Op] = {}


def register(name: str, forward, backward, has_kink: bool = False) -> None:
    OPS[name] = Op(name, forward, backward, has_kink)


class Tensor:
    __slots__ = ("data", "graph", "requires_grad", "name")

    def __init__(self, data: np.ndarray, graph: "Graph", requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.graph = graph
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.apply("mul", self, self.graph.constant(-1.0))

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Graph:
    """A tape of op applications over a set of named parameters.

    ``params`` maps names to arrays; they are cast to ``dtype`` on binding
    (float32 for training, float64 for the gradient checker's shadow run).
    With ``record=False`` ops run forward only, which is what inference uses.
    """

    def __init__(
        self,
        params: Mapping[str, np.ndarray] | None = None,
        dtype=np.float32,
        record: bool = True,
        frozen: Sequence[str] = (),
        track_kinks: bool = False,
    ):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.track_kinks = track_kinks
        self._arrays = dict(params or {})
        self._frozen = set(frozen)
        self.params: dict[str, Tensor] = {}
        self.nodes: list[tuple[str, tuple[Tensor, ...], Tensor, dict]] = []
        self.kinks: list[np.ndarray] = []
        self.consumed = False

    def param(self, name: str) -> Tensor:
        t = self.params.get(name)
        if t is None:
            if name not in self._arrays:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.asarray(self._arrays[name], dtype=self.dtype)
            t = Tensor(arr, self, requires_grad=self.record and name not in self._frozen, name=name)
            self.params[name] = t
        return t

    def bind_all(self) -> dict[str, Tensor]:
        return {name: self.param(name) for name in self._arrays}

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), self)

    def apply(self, op_name: str, *inputs: Tensor, **attrs: Any) -> Tensor:
        op = OPS[op_name]
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{op_name}: input belongs to a different graph")
        ctx: dict = dict(attrs)
        out = op.forward(ctx, *(t.data for t in inputs))
        if out.dtype != self.dtype and np.issubdtype(out.dtype, np.floating):
            out = out.astype(self.dtype)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op_name)
        if self.track_kinks and op.has_kink:
            self.kinks.append(ctx["active"].copy())
        requires = self.record and any(t.requires_grad for t in inputs)
        result = Tensor(out, self, requires_grad=requires)
        if requires:
            self.nodes.append((op_name, inputs, result, ctx))
        return result

    def kink_signature(self) -> list[np.ndarray]:
        return list(self.kinks)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter bound to ``graph``.

    Parameters that were never used, or are not on a path to ``loss``, get
    zero gradients of their own shape. The tape is consumed as it is
    walked, which frees activations early and breaks the graph/tensor
    reference cycle; a second call on the same graph raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if graph.consumed:
        raise RuntimeError("backward: this graph's tape was already consumed")
    graph.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    while graph.nodes:
        op_name, inputs, out, ctx = graph.nodes.pop()
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = OPS[op_name].backward(ctx, g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for name in graph._arrays:
        t = graph.params.get(name)
        g = grads.get(id(t)) if t is not None else None
        shape = np.shape(graph._arrays[name])
        result[name] = np.zeros(shape, dtype=graph.dtype) if g is None else np.asarray(g, dtype=graph.dtype).reshape(shape)
    return result


# ---------------------------------------------------------------------------
# op implementations


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


def _binary(name: str, fn, grad_a, grad_b):
    def forward(ctx, a, b):
        _broadcast_check(name, a, b)
        ctx["a"], ctx["b"] = a, b
        return fn(a, b)

    def bwd(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad_a(g, a, b), a.shape), _unbroadcast(grad_b(g, a, b), b.shape)

    register(name, forward, bwd)


_binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g)
_binary("sub", np.subtract, lambda g, a, b: g, lambda g, a, b: -g)
_binary("mul", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)


def _matmul_fwd(ctx, a, b):
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    ctx["a"], ctx["b"] = a, b
    return a @ b


def _matmul_bwd(ctx, g):
    a, b = ctx["a"], ctx["b"]
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
    return ga, gb


register("matmul", _matmul_fwd, _matmul_bwd)


def _transpose_fwd(ctx, x):
    if x.ndim != 2:
        raise ShapeError("transpose", [x.shape], "expects a matrix")
    return x.T


register("transpose", _transpose_fwd, lambda ctx, g: (g.T,))


def _concat_fwd(ctx, *xs):
    axis = ctx.get("axis", -1)
    ref = xs[0].shape
    nd = len(ref)
    ax = axis % nd
    for x in xs:
        if x.ndim != nd or any(x.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", [x.shape for x in xs])
    ctx["sizes"] = [x.shape[ax] for x in xs]
    ctx["ax"] = ax
    return np.concatenate(xs, axis=ax)


def _concat_bwd(ctx, g):
    splits = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=ctx["ax"]))


register("concat", _concat_fwd, _concat_bwd)


def _embedding_fwd(ctx, table):
    ids = np.asarray(ctx["ids"])
    if table.ndim != 2:
        raise ShapeError("embedding", [table.shape], "table must be 2-D")
    if ids.size and ids.max() >= table.shape[0]:
        raise ShapeError("embedding", [table.shape, ids.shape], f"id {int(ids.max())} out of range")
    valid = ids >= 0
    ctx["valid"] = valid
    ctx["n_rows"] = table.shape[0]
    out = table[np.where(valid, ids, 0)]
    out[~valid] = 0.0
    return out


def _embedding_bwd(ctx, g):
    ids, valid = np.asarray(ctx["ids"]), ctx["valid"]
    grad = np.zeros((ctx["n_rows"], g.shape[-1]), dtype=g.dtype)
    np.add.at(grad, ids[valid], g[valid])
    return (grad,)


register("embedding", _embedding_fwd, _embedding_bwd)


def _relu_fwd(ctx, x):
    active = x > 0
    ctx["active"] = active
    return np.where(active, x, 0.0).astype(x.dtype)


register("relu", _relu_fwd, lambda ctx, g: (g * ctx["active"],), has_kink=True)


def _prelu_fwd(ctx, x, alpha):
    _broadcast_check("prelu", x, alpha)
    active = x > 0
    ctx["active"], ctx["x"], ctx["alpha"] = active, x, alpha
    return np.where(active, x, alpha * x)


def _prelu_bwd(ctx, g):
    active, x, alpha = ctx["active"], ctx["x"], ctx["alpha"]
    gx = g * np.where(active, 1.0, alpha)
    galpha = _unbroadcast(np.where(active, 0.0, g * x), alpha.shape)
    return gx.astype(g.dtype), galpha.astype(g.dtype)


register("prelu", _prelu_fwd, _prelu_bwd, has_kink=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_fwd(ctx, x):
    y = _sigmoid(x)
    ctx["y"] = y
    return y


register("sigmoid", _sigmoid_fwd, lambda ctx, g: (g * ctx["y"] * (1.0 - ctx["y"]),))


def _exp_fwd(ctx, x):
    with np.errstate(over="ignore"):
        y = np.exp(x)
    ctx["y"] = y
    return y


register("exp", _exp_fwd, lambda ctx, g: (g * ctx["y"],))


def _log_fwd(ctx, x):
    if np.any(x <= 0):
        raise ValueError("log: input must be positive")
    ctx["x"] = x
    return np.log(x)


register("log", _log_fwd, lambda ctx, g: (g / ctx["x"],))


def _flush_subnormal(p: np.ndarray) -> np.ndarray:
    # subnormal probabilities make every downstream matmul crawl; they are zero at this precision anyway
    p[p < np.finfo(p.dtype).tiny] = 0.0
    return p


def _exp_nonpositive(d: np.ndarray) -> np.ndarray:
    # exp(d) for d <= 0 with results below the normal range set to exactly 0
    floor = np.log(np.finfo(d.dtype).tiny)
    e = np.exp(np.maximum(d, floor))
    e[d < floor] = 0.0
    return e


def _softmax_fwd(ctx, x):
    axis = ctx.get("axis", -1)
    mask = ctx.get("mask")
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = _exp_nonpositive(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        big_neg = np.finfo(x.dtype).min
        m = np.where(mask, x, big_neg).max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m) & (m > big_neg), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)
    ctx["y"] = _flush_subnormal(y.astype(x.dtype))
    return ctx["y"]


def _softmax_bwd(ctx, g):
    y = ctx["y"]
    axis = ctx.get("axis", -1)
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


register("softmax", _softmax_fwd, _softmax_bwd)


def _l2n_fwd(ctx, x):
    axis = ctx.get("axis", -1)
    n = np.sqrt((x.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(n < NORM_EPS):
        raise DegenerateNormError(f"l2_normalize: vector norm below {NORM_EPS:g}")
    n = n.astype(x.dtype)
    y = x / n
    ctx["y"], ctx["n"] = y, n
    return y


def _l2n_bwd(ctx, g):
    y, n = ctx["y"], ctx["n"]
    axis = ctx.get("axis", -1)
    return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)


register("l2_normalize", _l2n_fwd, _l2n_bwd)


def _dot_fwd(ctx, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("dot", [a.shape, b.shape])
    _broadcast_check("dot", a, b)
    ctx["a"], ctx["b"] = a, b
    return (a * b).sum(axis=-1)


def _dot_bwd(ctx, g):
    a, b = ctx["a"], ctx["b"]
    g = g[..., None]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


register("dot", _dot_fwd, _dot_bwd)


def _sum_fwd(ctx, x):
    ctx["shape"] = x.shape
    return np.asarray(x.sum(axis=ctx.get("axis"), keepdims=ctx.get("keepdims", False)))


def _sum_bwd(ctx, g):
    shape, axis = ctx["shape"], ctx.get("axis")
    if axis is not None and not ctx.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


register("reduce_sum", _sum_fwd, _sum_bwd)


def _reshape_fwd(ctx, x):
    ctx["shape"] = x.shape
    try:
        return x.reshape(ctx["new_shape"])
    except ValueError:
        raise ShapeError("reshape", [x.shape, tuple(ctx["new_shape"])]) from None


register("reshape", _reshape_fwd, lambda ctx, g: (g.reshape(ctx["shape"]),))


def _sce_fwd(ctx, z):
    y = np.asarray(ctx["labels"], dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError("sigmoid_cross_entropy", [z.shape, y.shape])
    ctx["z"], ctx["y"] = z, y
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


register("sigmoid_cross_entropy", _sce_fwd, lambda ctx, g: (g * (_sigmoid(ctx["z"]) - ctx["y"]),))


def _softmax_ce_fwd(ctx, z):
    target = np.asarray(ctx["target"])
    if z.ndim != 2 or target.shape != (z.shape[0],):
        raise ShapeError("softmax_cross_entropy", [z.shape, target.shape])
    m = z.max(axis=1, keepdims=True)
    e = _exp_nonpositive(z - m)
    s = e.sum(axis=1, keepdims=True)
    ctx["p"] = _flush_subnormal(e / s)
    ctx["target"] = target
    lse = (m + np.log(s))[:, 0]
    return lse - z[np.arange(z.shape[0]), target]


def _softmax_ce_bwd(ctx, g):
    p = ctx["p"].copy()
    p[np.arange(p.shape[0]), ctx["target"]] -= 1.0
    return (g[:, None] * p,)


register("softmax_cross_entropy", _softmax_ce_fwd, _softmax_ce_bwd)


# ---------------------------------------------------------------------------
# functional surface


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("add", a, a._lift(b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("sub", a, a._lift(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("mul", a, a._lift(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("matmul", a, a._lift(b))


def transpose(x: Tensor) -> Tensor:
    return x.graph.apply("transpose", x)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return xs[0].graph.apply("concat", *xs, axis=axis)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; negative ids are padding and yield zero rows."""
    return table.graph.apply("embedding", table, ids=np.asarray(ids))


def relu(x: Tensor) -> Tensor:
    return x.graph.apply("relu", x)


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    return x.graph.apply("prelu", x, alpha)


def sigmoid(x: Tensor) -> Tensor:
    return x.graph.apply("sigmoid", x)


def exp(x: Tensor) -> Tensor:
    return x.graph.apply("exp", x)


def log(x: Tensor) -> Tensor:
    return x.graph.apply("log", x)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction; masked-out entries get exactly zero."""
    return x.graph.apply("softmax", x, axis=axis, mask=mask)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return x.graph.apply("l2_normalize", x, axis=axis)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("dot", a, a._lift(b))


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return x.graph.apply("reduce_sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return reduce_sum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return x.graph.apply("reshape", x, new_shape=tuple(shape))


def sigmoid_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Elementwise binary cross-entropy on logits, in the stable form."""
    return logits.graph.apply("sigmoid_cross_entropy", logits, labels=np.asarray(labels))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Per-row cross-entropy of ``logits`` (B, C) against class indices."""
    return logits.graph.apply("softmax_cross_entropy", logits, target=np.asarray(target))
