"""Central finite-difference gradient checking (64-bit only)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

MAX_COORDS = 64


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-12, abs(analytic) + abs(numeric))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = MAX_COORDS,
    seed: int = 0,
) -> float:
    """Max relative error between backward() and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Only inputs with
    ``requires_grad`` are checked, on at most ``max_coords`` coordinates each.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check runs in 64-bit mode; got {t.dtype} input")
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"program output must be scalar, got shape {out.shape}")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                f_plus = fn(*inputs).item()
                flat[c] = orig - h
                f_minus = fn(*inputs).item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[c]), numeric))
    return worst
