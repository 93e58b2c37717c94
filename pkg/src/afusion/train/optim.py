"""Adam with decoupled weight decay; frozen parameters are never touched."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """One update of every parameter that requires grad and holds a gradient.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    live = [(n, p) for n, p in params if p.requires_grad and p.grad is not None]
    for name, p in live:
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {p.grad.size} entries "
                                     f"(step {state.step_count}, lr {lr:g})")
    state.step_count += 1
    for name, p in live:
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        v = state.v[name]
        state.steps[name] += 1
        t = state.steps[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1 - b2) * g * g
        m_hat = m / p.dtype.type(1 - b1 ** t)
        v_hat = v / p.dtype.type(1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + p.dtype.type(state.eps))
        if state.weight_decay:
            update = update + p.dtype.type(state.weight_decay) * p.data
        p.data = p.data - p.dtype.type(lr) * update
    return state


class Adam:
    def __init__(self, named_params, lr: float, weight_decay: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named_params = named_params
        self.state = OptimizerState(lr, weight_decay, betas, eps)

    def step(self, lr: float | None = None) -> None:
        adam_step(list(self.named_params()), self.state, lr)
