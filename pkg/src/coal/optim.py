"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coal.tensor import Parameter, Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: list[Parameter],
    grads: dict[str, Tensor],
    state: AdamWState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> AdamWState:
    """One in-place AdamW update of every non-frozen parameter.

    The decay is applied to the weights before the Adam step, as in the
    decoupled formulation: ``w <- w(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    for p in params:
        if p.frozen:
            continue
        if p.name not in grads:
            raise KeyError(f"missing gradient for parameter {p.name}")
        g = grads[p.name].data.astype(p.dtype, copy=False)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        w = p.data * (1 - lr * weight_decay)
        p.data = (w - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state.m[p.name] = m.astype(p.dtype)
        state.v[p.name] = v.astype(p.dtype)
    return state
