"""Layer fusion (ARI and weighted sum) and the co-attention gate over auxiliary tasks."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Module, uniform_init


def _weighted_layers(layers: Sequence[Tensor], w: Tensor) -> Tensor:
    # (..., d, n) @ (n, 1) -> (..., d)
    stacked = ad.stack(list(layers), axis=-1)
    out = ad.matmul(stacked, ad.reshape(w, (len(layers), 1)))
    return ad.reshape(out, stacked.shape[:-1])


def ari_fuse(stack: Sequence[Tensor], w: Tensor) -> Tensor:
    """Concatenate the last layer with a learned weighted sum of all earlier layers.

    ``stack`` holds F_1..F_L with identical shapes (..., T, d); ``w`` has
    L - 1 entries. Output is (..., T, 2d): [F_L ; sum_i w_i F_i].
    """
    if len(stack) < 2:
        raise ad.ShapeError(f"ari_fuse needs at least 2 layers, got {len(stack)}")
    if w.shape != (len(stack) - 1,):
        raise ad.ShapeError(f"ari_fuse: {len(stack)} layers need {len(stack) - 1} weights, got shape {w.shape}")
    return ad.concat([stack[-1], _weighted_layers(stack[:-1], w)], axis=-1)


def weighted_sum_fuse(stack: Sequence[Tensor], v: Tensor) -> Tensor:
    """sum_i v_i F_i over all L layers; output keeps width d."""
    if v.shape != (len(stack),):
        raise ad.ShapeError(f"weighted_sum_fuse: {len(stack)} layers need {len(stack)} weights, got shape {v.shape}")
    return _weighted_layers(stack, v)


class AriFusion(Module):
    def __init__(self, n_layers: int, dtype=np.float64) -> None:
        self.w = Parameter(np.full(n_layers - 1, 1.0 / (n_layers - 1), dtype=dtype), "fusion.ari.w")

    def out_dim(self, d: int) -> int:
        return 2 * d

    def __call__(self, stack: Sequence[Tensor]) -> Tensor:
        return ari_fuse(stack, self.w)

    def weights(self) -> list[float]:
        return self.w.data.astype(float).tolist()


class WeightedSumFusion(Module):
    def __init__(self, n_layers: int, dtype=np.float64) -> None:
        self.v = Parameter(np.full(n_layers, 1.0 / n_layers, dtype=dtype), "fusion.wsum.v")

    def out_dim(self, d: int) -> int:
        return d

    def __call__(self, stack: Sequence[Tensor]) -> Tensor:
        return weighted_sum_fuse(stack, self.v)

    def weights(self) -> list[float]:
        return self.v.data.astype(float).tolist()


def make_fusion(mode: str, n_layers: int, dtype=np.float64) -> Module:
    if mode == "ari":
        return AriFusion(n_layers, dtype)
    if mode == "weighted_sum":
        return WeightedSumFusion(n_layers, dtype)
    raise ValueError(f"unknown fusion mode {mode!r}")


class CoAttention(Module):
    """Pooled SER feature attends over auxiliary hidden vectors and gates itself.

    scores_i = (ser Q) . (h_i K) / sqrt(d_a); c = sum_i softmax(scores)_i h_i V;
    g = sigmoid(c G + b); output = [ser * g ; h_1 ; ... ; h_K].
    Q, K, V, G are shared across tasks.
    """

    def __init__(self, d_s: int, d_a: int, rng: np.random.Generator, dtype=np.float64) -> None:
        self.d_s, self.d_a = d_s, d_a
        self.q = Parameter(uniform_init(rng, (d_s, d_a), d_s, dtype), "coattn.q")
        self.k = Parameter(uniform_init(rng, (d_a, d_a), d_a, dtype), "coattn.k")
        self.v = Parameter(uniform_init(rng, (d_a, d_a), d_a, dtype), "coattn.v")
        self.g = Parameter(uniform_init(rng, (d_a, d_s), d_a, dtype), "coattn.g")
        self.b = Parameter(np.zeros(d_s, dtype=dtype), "coattn.b")
        self.last_attention: np.ndarray | None = None

    def out_dim(self, n_tasks: int) -> int:
        return self.d_s + n_tasks * self.d_a

    def __call__(self, ser_vec: Tensor, aux: Sequence[Tensor]) -> Tensor:
        if not aux:
            raise ValueError("co-attention needs at least one auxiliary task; bypass it for SER-only")
        if ser_vec.shape[-1] != self.d_s:
            raise ad.ShapeError(f"co-attention: SER vector width {ser_vec.shape[-1]} != {self.d_s}")
        for h in aux:
            if h.shape[-1] != self.d_a or h.shape[:-1] != ser_vec.shape[:-1]:
                raise ad.ShapeError(f"co-attention: aux vector {h.shape} incompatible with "
                                    f"SER vector {ser_vec.shape} and d_a={self.d_a}")
        b = ser_vec.shape[0]
        hs = ad.stack(list(aux), axis=1)                          # (B, K, d_a)
        query = ad.reshape(ad.matmul(ser_vec, self.q), (b, 1, self.d_a))
        keys = ad.matmul(hs, self.k)
        vals = ad.matmul(hs, self.v)
        scores = ad.matmul(query, ad.transpose(keys, (0, 2, 1))) * (1.0 / np.sqrt(self.d_a))
        attn = ad.softmax(scores, axis=-1)                        # (B, 1, K)
        self.last_attention = attn.data[:, 0, :].copy()
        ctx = ad.reshape(ad.matmul(attn, vals), (b, self.d_a))
        gate = ad.sigmoid(ad.matmul(ctx, self.g) + self.b)
        return ad.concat([ser_vec * gate] + list(aux), axis=-1)
