"""Adam with bias correction and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_for(self, params: list[np.ndarray]) -> None:
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float | None = None) -> list[np.ndarray]:
    """Apply one bias-corrected Adam update to ``params`` in place.

    A ``None`` gradient is treated as zero.  Moments are allocated lazily on
    the first call.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.init_for(params)
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam over a list of parameter tensors, reading their ``.grad``."""

    def __init__(self, params: list[Tensor], lr: float = 2e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state.init_for([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


def linear_warmup_decay(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.1) -> float:
    """Learning rate at 0-based ``step``: linear ramp to ``peak_lr`` then linear decay to 0."""
    if total_steps <= 0:
        return peak_lr
    warmup = max(1, int(round(warmup_ratio * total_steps)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    remaining = max(1, total_steps - warmup)
    return peak_lr * max(0.0, (total_steps - step) / remaining)
