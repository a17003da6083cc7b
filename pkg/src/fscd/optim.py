"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, config: OptimizerConfig,
              names=None) -> None:
    """One in-place Adam update of ``params`` (restricted to ``names`` if given).

    Gradients are read from each tensor's ``.grad``.
    """
    names = list(params) if names is None else list(names)
    for name in names:
        if params[name].grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.data.dtype, copy=False)
