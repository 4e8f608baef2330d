"""Central finite differences, used as an independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericError, Tensor


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    v = float(np.asarray(v).reshape(-1)[0]) if np.size(v) == 1 else float(v)
    if not np.isfinite(v):
        raise NumericError("objective evaluated to a non-finite value")
    return v


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate ``i`` of ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_param_grads(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-5,
                      indices: dict | None = None) -> float:
    """Compare backward() gradients of ``loss_fn()`` with finite differences.

    ``params`` maps names to leaf tensors (perturbed in place). ``indices``
    optionally restricts each parameter to a list of flat coordinates.
    Returns the worst relative error.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = range(flat.size) if indices is None else indices.get(name, [])
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(loss_fn())
            flat[i] = orig - h
            fm = _scalar(loss_fn())
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, max_rel_error(analytic.reshape(-1)[i], num))
    return worst
