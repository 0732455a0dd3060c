"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 2,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is a zero-argument closure over ``params`` returning a scalar.  With
    ``max_coords`` set, each parameter tensor is probed at that many randomly
    chosen coordinates instead of all of them.  ``stencil=4`` uses the
    fourth-order five-point difference, which tolerates a larger ``h`` and so
    keeps roundoff small on coordinates with tiny gradients.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]

            def at(step):
                flat[i] = orig + step
                return f().item()

            if stencil == 2:
                g_fd = (at(h) - at(-h)) / (2 * h)
            else:
                g_fd = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
            flat[i] = orig
            worst = max(worst, float(relative_error(g_ad.reshape(-1)[i], g_fd)))
    for p in params:
        p.grad = None
    return worst
