"""Parameter initialisation and small building blocks shared by the models."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor


def init_dense(rng: np.random.Generator, params: dict, prefix: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, scale, size=(fan_in, fan_out))
    params[f"{prefix}.w"] = w.astype(np.float32)
    params[f"{prefix}.b"] = np.zeros(fan_out, dtype=np.float32)


def init_mlp(
    rng: np.random.Generator,
    params: dict,
    prefix: str,
    widths: Sequence[int],
    zero_last: bool = False,
    prelu_init: float = 0.25,
) -> None:
    """Affine layers ``widths[0] -> ... -> widths[-1]`` with a PReLU slope per hidden unit."""
    n = len(widths) - 1
    for i in range(n):
        init_dense(rng, params, f"{prefix}{i}", widths[i], widths[i + 1], zero=zero_last and i == n - 1)
        if i < n - 1:
            params[f"{prefix}{i}.alpha"] = np.full(widths[i + 1], prelu_init, dtype=np.float32)


def mlp(g: Graph, prefix: str, n_layers: int, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run a PReLU MLP; returns the output and the list of hidden activations."""
    hidden = []
    for i in range(n_layers):
        x = x @ g.param(f"{prefix}{i}.w") + g.param(f"{prefix}{i}.b")
        if i < n_layers - 1:
            x = T.prelu(x, g.param(f"{prefix}{i}.alpha"))
            hidden.append(x)
    return x, hidden


def attention_pool(g: Graph, prefix: str, seq: Tensor, mask: np.ndarray, target: Tensor) -> tuple[Tensor, Tensor]:
    """Target attention over a padded sequence.

    ``seq`` is (B, L, d), ``target`` (B, d), ``mask`` (B, L) bool. Scores come
    from a PReLU unit over ``[v_i, v_c, v_i * v_c, v_i - v_c]`` and are
    normalised by a masked softmax, so padded slots get weight exactly zero
    and an all-padding row pools to the zero vector.
    """
    B, L, d = seq.shape
    if target.shape != (B, d):
        raise T.ShapeError("attention_pool", [seq.shape, target.shape])
    tgt = T.reshape(target, (B, 1, d)) + g.constant(np.zeros((1, L, 1)))
    feats = T.concat([seq, tgt, seq * tgt, seq - tgt], axis=-1)
    h = T.prelu(feats @ g.param(f"{prefix}0.w") + g.param(f"{prefix}0.b"), g.param(f"{prefix}0.alpha"))
    scores = T.reshape(h @ g.param(f"{prefix}1.w") + g.param(f"{prefix}1.b"), (B, L))
    weights = T.softmax(scores, axis=-1, mask=mask)
    pooled = T.reduce_sum(T.reshape(weights, (B, L, 1)) * seq, axis=1)
    return pooled, weights


def init_attention(rng: np.random.Generator, params: dict, prefix: str, dim: int, hidden: int) -> None:
    init_mlp(rng, params, prefix, [4 * dim, hidden, 1])


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
