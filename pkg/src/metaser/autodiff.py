"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every primitive computes its forward value eagerly. When at least one input
requires a gradient and a :class:`Tape` is active on the current thread, the
primitive appends a node holding a closure that maps the output gradient to
input gradients. Nodes are appended in creation order, so the tape is already
topologically sorted and :meth:`Tape.backward` is a single reverse sweep.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "active_tape",
    "backward",
    "as_tensor",
    "apply_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "getitem",
    "sum_",
    "mean",
    "exp",
    "log",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "attention",
    "embedding_lookup",
    "dropout",
    "conv1d",
]


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Inputs to a primitive have incompatible shapes."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "inputs", "grad_fn", "op")

    def __init__(self, out, inputs, grad_fn, op):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.op = op


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; tapes are thread-local and may be nested (the
    innermost one records).
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: Sequence["Tensor"], grad_fn, op: str) -> None:
        out._tape = self
        self.nodes.append(_Node(out, tuple(inputs), grad_fn, op))

    def backward(self, loss: "Tensor") -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns a map from parameter name to gradient for every trainable
        :class:`Parameter` reachable from ``loss``. Gradients are also
        accumulated into ``tensor.grad`` for every tensor that requires one.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.grad_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is None:
                    leaves[key] = inp
        if id(loss) in grads and loss._tape is None:
            leaves[id(loss)] = loss
        out: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            if isinstance(leaf, Parameter) and leaf.trainable:
                if leaf.name in out:
                    raise ValueError(f"duplicate parameter name {leaf.name!r}")
                out[leaf.name] = g
        return out


def backward(loss: "Tensor") -> dict[str, np.ndarray]:
    """Backpropagate through the tape that recorded ``loss``."""
    if loss._tape is None:
        if loss.requires_grad:
            # loss is itself a leaf
            if isinstance(loss, Parameter) and loss.trainable:
                return {loss.name: np.ones_like(loss.data)}
            return {}
        raise ValueError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


class Tensor:
    """Dense real-valued array with an optional gradient."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Named learnable tensor. ``trainable=False`` is the freeze flag."""

    def __init__(self, data, name: str, trainable: bool = True, dtype=None) -> None:
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values (shape {arr.shape})")


def apply_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
             grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a computed forward value and record it on the active tape.

    ``grad_fn`` receives the output gradient and returns one gradient (or
    None) per input. It is only called for recorded nodes.
    """
    _check_finite(op, out_data)
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, inputs, grad_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return a, b


# ----------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data   # the finite check reports the failure

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op("div", out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch axes of {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one GEMM
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op("matmul", out, (a, b), grad_fn)


# ------------------------------------------------------------ shape handling

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return apply_op("concat", out, tensors, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all shapes must match, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return apply_op("stack", out, tensors, grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return apply_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing (``slice`` in the primitive set)."""
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {a.shape}: {exc}") from None
    out = np.array(out, copy=True)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing never repeats an element
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply_op("slice", out, (a,), grad_fn)


# ---------------------------------------------------------------- reductions

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return apply_op("sum", out, (a,),
                    lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)

    def grad_fn(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return apply_op("mean", out, (a,), grad_fn)


# ----------------------------------------------------------------- pointwise

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return apply_op("log", out, (a,), lambda g: (g / a.data,))


# Gradient checks register a list here to learn how close inputs came to the kink.
_kink_probes: list[list[float]] = []


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _kink_probes and a.data.size:
        for probe in _kink_probes:
            probe.append(float(np.abs(a.data).min()))
    return apply_op("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return apply_op("gelu", out, (a,), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid exp overflow
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(a.dtype)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op("tanh", out, (a,), lambda g: (g * (1.0 - out ** 2),))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - _lse(a.data, axis)

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (a,), grad_fn)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    lse = _lse(a.data, axis)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(a.data - lse),)

    return apply_op("logsumexp", out, (a,), grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + key_bias) v over the last two axes.

    ``key_bias`` is a constant broadcastable to the score shape, e.g. large
    negative values at padded key positions.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    s *= scale
    if key_bias is not None:
        s += key_bias
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def grad_fn(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g) if v.requires_grad else None
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) if k.requires_grad else None
        return gq, gk, gv

    return apply_op("attention", out, (q, k, v), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    d = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = [x] + [p for p in (gamma, beta) if p is not None]

    def grad_fn(g):
        grads = []
        gx = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            grads.append(dx)
        else:
            grads.append(None)
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return grads

    return apply_op("layer_norm", out, inputs, grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return apply_op("embedding_lookup", out, (table,), grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return apply_op("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: tuple[int, int]) -> Tensor:
    """Channels-last 1-D convolution.

    x: (B, N, C_in), w: (K, C_in, C_out), b: (C_out,) -> (B, T, C_out) with
    T = (N + pad_l + pad_r - K) // stride + 1.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k, cin, cout = w.shape
    xp = np.pad(x.data, ((0, 0), pad, (0, 0)))
    n = xp.shape[1]
    if n < k:
        raise ShapeError(f"conv1d: padded length {n} shorter than kernel {k}")
    t = (n - k) // stride + 1
    # (B, T, K, C_in) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride][:, :t]
    win = win.transpose(0, 1, 3, 2)
    cols = win.reshape(x.shape[0], t, k * cin)
    wmat = w.data.reshape(k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    inputs = [x, w] + ([b] if b is not None else [])

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(x.shape[0], t, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j: j + stride * (t - 1) + 1: stride] += gcols[:, :, j]
            gx = gxp[:, pad[0]: pad[0] + x.shape[1]]
        if w.requires_grad:
            gw = np.einsum("btk,bto->ko", cols, g).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1))
        return [gx, gw] + ([gb] if b is not None else [])

    return apply_op("conv1d", out, inputs, grad_fn)


# ------------------------------------------------------------------ helpers

def parameters_by_name(params: Iterable[Parameter]) -> dict[str, Parameter]:
    out: dict[str, Parameter] = {}
    for p in params:
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p
    return out
