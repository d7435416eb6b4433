from __future__ import annotations

from typing import Iterable, Mapping, MutableMapping

import numpy as np


class Adam:
    """Adam with bias correction, updating float32 parameter arrays in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: MutableMapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        names: Iterable[str] | None = None,
    ) -> None:
        names = list(params) if names is None else list(names)
        missing = [n for n in names if n not in grads]
        if missing:
            raise KeyError(f"adam_step: missing gradient for {missing}")
        for n in names:
            if np.shape(grads[n]) != np.shape(params[n]):
                raise ValueError(f"adam_step: gradient shape {np.shape(grads[n])} != parameter shape {np.shape(params[n])} for {n!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for n in names:
            p = params[n]
            g = np.asarray(grads[n], dtype=np.float32)
            m = self.m.get(n)
            if m is None:
                m = self.m[n] = np.zeros_like(p, dtype=np.float32)
                self.v[n] = np.zeros_like(p, dtype=np.float32)
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": dict(self.m), "v": dict(self.v)}
