"""Bias-corrected Adam over a dict of named arrays."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(tensors, grads, state, names=None):
    """Update ``tensors`` in place from ``grads``; only ``names`` (default: all
    keys of ``grads``) move. Returns ``(tensors, state)``.
    """
    names = list(grads) if names is None else list(names)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name in names:
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name], state.second_moment[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensors[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return tensors, state
