"""Plain SGD and Adam updates over named parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import Parameter, parameters_by_name


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray],
                  lr, state: OptimizerState, rule: str = "adam",
                  betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """Apply one in-place update to every parameter that has a gradient.

    ``lr`` is a float or a callable mapping a parameter name to its rate.
    Frozen parameters are never touched; passing a gradient for one is an
    error, as is a gradient for a name not in ``params``.
    """
    lr_of: Callable[[str], float] = lr if callable(lr) else (lambda _name: lr)
    for name in grads:
        p = params.get(name)
        if p is None:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not p.trainable:
            raise ValueError(f"gradient for frozen parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    for name in sorted(grads):
        p, g = params[name], grads[name]
        rate = lr_of(name)
        if rate <= 0:
            raise ValueError(f"learning rate must be positive, got {rate} for {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if rule == "sgd":
            p.data = (p.data - rate * g).astype(p.dtype)
        elif rule == "adam":
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            # per-parameter step counts would differ only if a parameter skips steps
            mhat = m / (1 - b1 ** state.step)
            vhat = v / (1 - b2 ** state.step)
            p.data = (p.data - rate * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        else:
            raise ValueError(f"unknown update rule {rule!r}")
    return state


class Optimizer:
    """Stateful wrapper around :func:`sgd_adam_step`."""

    def __init__(self, params: Iterable[Parameter], lr, rule: str = "adam",
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = parameters_by_name(params)
        self.lr = lr
        self.rule = rule
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        sgd_adam_step(self.params, grads, self.lr, self.state, self.rule, self.betas, self.eps)
