"""Adam optimizer with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimError(ValueError):
    pass


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise OptimError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimError("betas must lie in [0, 1)")
        if self.t < 0:
            raise OptimError("step count must be non-negative")


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update of every parameter tensor."""
    state.validate()
    if set(grads) != set(params):
        raise OptimError("gradient keys do not match parameter keys")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=p.dtype)
        if g.shape != p.shape:
            raise OptimError(f"{key}: gradient shape {g.shape} != {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
