"""Adam optimizer for :class:`~phgcn.autograd.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes the gradients afterwards.

    ``weight_decay`` adds an L2 term ``wd * theta`` to each gradient (the
    GAT-style regularizer, off by default). Raises ``ValueError`` if any
    parameter has no gradient and ``FloatingPointError`` if a moment or
    parameter stops being finite (an overflowing second moment would
    otherwise freeze the update at zero).
    """
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.values
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.values)
            state.v[i] = np.zeros_like(p.values)
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        with np.errstate(over="ignore", invalid="ignore"):
            v += (1.0 - state.beta2) * g * g
            p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p.values))):
            raise FloatingPointError(f"adam_step: non-finite update for {p.name or i}")
        p.grad = None


class Adam:
    """Binds a parameter list to an :class:`AdamState`."""

    def __init__(self, params, lr: float = 0.005, weight_decay: float = 0.0, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, **kw)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
