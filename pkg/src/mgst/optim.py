"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Parameter


class NonFiniteGradientError(FloatingPointError):
    code = "non_finite_gradient"

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step rejected")
        self.param = name


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: Sequence[Parameter], grads: Mapping, state: AdamState,
              frozen: frozenset = frozenset()) -> AdamState:
    """Apply one update in place.

    ``grads`` maps parameter names (or the parameters themselves) to arrays.
    All gradients are checked before anything is touched, so a rejected step
    leaves parameters and moments unchanged.  Names in ``frozen`` are skipped
    but still count towards the step number.
    """
    active = [p for p in params if p.name not in frozen]
    gs = []
    for p in active:
        g = grads[p] if p in grads else grads[p.name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name)
        gs.append(g)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(active, gs):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)
    return state
