"""
Adam optimizer over dictionaries of numpy parameter arrays
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from errors import ShapeMismatchError

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError(f"Invalid Adam hyperparameters: {self}")


@dataclass
class AdamState:
    """First and second moment estimates per parameter"""
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState, hyper: AdamHyper,
              t: int) -> Tuple[Params, AdamState]:
    """
    One Adam update with bias correction

    Args:
        params: Current parameters
        grads: Gradients with the same keys and shapes
        state: Moment estimates from step t - 1 (empty at t = 1)
        hyper: Learning rate, decay rates and epsilon
        t: Step number, >= 1

    Returns:
        Tuple of (new parameters, new state); inputs are not modified
    """
    if t < 1:
        raise ValueError(f"Adam step number must be at least 1, got {t}")
    if set(params) != set(grads):
        raise ShapeMismatchError(f"Gradient keys {sorted(grads)} do not match parameters {sorted(params)}")

    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    new_params: Params = {}
    new_state = AdamState()
    for key, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != value.shape:
            raise ShapeMismatchError(f"Gradient '{key}' has shape {g.shape}, parameter has {value.shape}")
        m = state.m.get(key, np.zeros_like(value))
        v = state.v.get(key, np.zeros_like(value))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[key] = value - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_state.m[key] = m
        new_state.v[key] = v
    return new_params, new_state


class AdamOptimizer:
    """Stateful wrapper that counts steps and keeps the moments"""

    def __init__(self, hyper: AdamHyper = AdamHyper()):
        self.hyper = hyper
        self.state = AdamState()
        self.t = 0

    def step(self, params: Params, grads: Params) -> Params:
        self.t += 1
        new_params, self.state = adam_step(params, grads, self.state, self.hyper, self.t)
        return new_params
