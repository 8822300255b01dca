"""Small parameter containers shared by the encoder, fusion and heads."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Anything holding Parameters as attributes or in child modules."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        _collect(list(vars(self).values()), out)
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


def _collect(values, out: list) -> None:
    for value in values:
        if isinstance(value, Parameter):
            out.append(value)
        elif isinstance(value, Module):
            out.extend(value.parameters())
        elif isinstance(value, (list, tuple)):
            _collect(value, out)
        elif isinstance(value, dict):
            _collect(list(value.values()), out)


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True) -> None:
        self.w = Parameter(uniform_init(rng, (d_in, d_out), d_in, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(d_out, dtype=dtype), f"{name}.b") if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ad.ShapeError(f"{self.w.name}: expected last axis {self.d_in}, got {x.shape}")
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
            y = ad.matmul(x, self.w)
            y = ad.reshape(y, (self.d_out,))
        else:
            y = ad.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, name: str, d: int, dtype=np.float64, eps: float = 1e-5) -> None:
        self.gamma = Parameter(np.ones(d, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(d, dtype=dtype), f"{name}.beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the time axis of (B, T, D) counting only frames where mask is 1."""
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:2]:
        raise ad.ShapeError(f"mean-pool: mask {m.shape} does not match features {x.shape}")
    counts = m.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mean-pool over an utterance with no valid frames")
    summed = ad.sum_(x * Tensor(m[:, :, None]), axis=1)
    return summed / Tensor(counts)
