"""Adam with coupled L2 weight decay (decay is added to the gradient)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.eps <= 0:
            raise ValueError("beta1, beta2 must lie in (0, 1) and eps must be positive")


def adam_update(params, grads, state):
    """One Adam step over the named parameters.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    Parameters without a gradient entry are passed through unchanged.
    """
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m_all = dict(state.first_moment)
    v_all = dict(state.second_moment)
    new_params = {}
    for name, theta in params.items():
        if name not in grads:
            new_params[name] = theta
            continue
        g = grads[name] + state.weight_decay * theta
        m = b1 * m_all.get(name, np.zeros_like(theta)) + (1 - b1) * g
        v = b2 * v_all.get(name, np.zeros_like(theta)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        m_all[name] = m
        v_all[name] = v
    new_state = OptimizerState(
        learning_rate=state.learning_rate, weight_decay=state.weight_decay,
        beta1=b1, beta2=b2, eps=state.eps, step_count=t,
        first_moment=m_all, second_moment=v_all,
    )
    return new_params, new_state
