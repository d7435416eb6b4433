"""Central finite-difference check of :func:`mmrec.tensor.backward`.

The loss is rebuilt in float64 for every probe. Coordinates whose ``+h`` or
``-h`` probe flips the active set of a relu/prelu are counted as kink skips
rather than compared, since no finite difference is meaningful there.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    n_kink_skipped: int = 0
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)


def _same_kinks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    loss_fn: Callable[[Graph], Tensor],
    params: Mapping[str, np.ndarray],
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = 24,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a fresh :class:`Graph` and must return a scalar
    tensor built from ``graph.param(name)`` lookups. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. When a parameter has more than
    ``max_coords`` entries a seeded random subset is probed.
    """
    if not params:
        raise ValueError("finite_diff_check: need at least one parameter")
    shadow = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate() -> tuple[float, list[np.ndarray]]:
        g = Graph(shadow, dtype=np.float64, record=False, track_kinks=True)
        return float(loss_fn(g).data), g.kink_signature()

    g = Graph(shadow, dtype=np.float64, track_kinks=True)
    loss = loss_fn(g)
    analytic = g.backward(loss)
    base_kinks = g.kink_signature()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, passed=True, tol=tol, n_checked=0)
    for name in sorted(shadow):
        flat = shadow[name].reshape(-1)
        grad = analytic[name].reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp, kp = evaluate()
            flat[c] = orig - h
            lm, km = evaluate()
            flat[c] = orig
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                report.n_kink_skipped += 1
                continue
            num = (lp - lm) / (2.0 * h)
            a = float(grad[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            report.n_checked += 1
            worst = max(worst, err)
            if err >= tol:
                report.failures.append(f"{name}[{int(c)}]: analytic={a:.6g} numeric={num:.6g} rel={err:.3g}")
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    report.passed = not report.failures
    return report
