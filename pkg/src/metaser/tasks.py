"""Task heads, cross-entropy and CTC losses, greedy CTC decoding and stage losses."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, masked_mean_pool

AUX_TASKS = ("gender", "speaker", "style", "asr")
DEFAULT_LOSS_WEIGHTS = {"asr": 1.0, "gender": 0.3, "speaker": 0.3, "style": 0.3}


class InfeasibleTargetError(ValueError):
    """CTC target cannot be aligned to the available frames."""


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log_softmax(logits)[label] over the batch.

    ``logits`` is (C,) with an int label or (B, C) with B labels.
    """
    single = logits.ndim == 1
    if single:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"cross_entropy: {n} rows of logits but labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: label out of range for {c} classes: {labels.tolist()}")
    picked = ad.getitem(ad.log_softmax(logits, axis=-1), (np.arange(n), labels))
    return -ad.mean(picked)


def _logsumexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward(lp: np.ndarray, target: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. per-frame log-probabilities.

    ``lp`` is (T, V+1) log-probabilities. Recursions run over the 2U+1
    blank-extended label sequence in log space.
    """
    t_len = lp.shape[0]
    target = [int(x) for x in target]
    if not target:
        raise InfeasibleTargetError("CTC target must contain at least one token")
    if not ctc_feasible(t_len, target):
        raise InfeasibleTargetError(f"CTC target of length {len(target)} cannot fit in {t_len} frames")
    ext = _extend(target, blank)
    s_len = len(ext)
    # skip transition s-2 -> s allowed for non-blank labels differing from s-2
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]                                         # (T, S)
    neg_inf = -np.inf

    alpha = np.full((t_len, s_len), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, t_len):
            prev = alpha[t - 1]
            one = np.concatenate(([neg_inf], prev[:-1]))
            two = np.where(skip, np.concatenate(([neg_inf, neg_inf], prev[:-2])), neg_inf)
            alpha[t] = _logsumexp3(prev, one, two) + emit[t]

        beta = np.full((t_len, s_len), neg_inf)
        beta[-1, -1] = emit[-1, -1]
        if s_len > 1:
            beta[-1, -2] = emit[-1, -2]
        skip_fwd = np.concatenate((skip[2:], [False, False]))   # s -> s+2 allowed
        for t in range(t_len - 2, -1, -1):
            nxt = beta[t + 1]
            one = np.concatenate((nxt[1:], [neg_inf]))
            two = np.where(skip_fwd, np.concatenate((nxt[2:], [neg_inf, neg_inf])), neg_inf)
            beta[t] = _logsumexp3(nxt, one, two) + emit[t]

    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if s_len > 1 else alpha[-1, -1]
    occ = np.exp(alpha + beta - emit - log_p)                 # (T, S) state posteriors
    grad = np.zeros_like(lp)
    np.add.at(grad, (slice(None), ext), -occ)
    return float(-log_p), grad


def ctc_loss(log_probs: Tensor, targets, lengths: Sequence[int] | None = None,
             blank: int | None = None) -> Tensor:
    """Mean CTC negative log-likelihood.

    ``log_probs`` is (T, V+1) for one utterance with a single target, or
    (B, T, V+1) with a list of targets and per-utterance frame counts.
    The blank defaults to the last class.
    """
    lp = log_probs.data
    single = lp.ndim == 2
    if single:
        lp = lp[None]
        targets = [targets]
        lengths = [lp.shape[1]]
    n_cls = lp.shape[-1]
    blank = n_cls - 1 if blank is None else blank
    if lengths is None:
        lengths = [lp.shape[1]] * lp.shape[0]
    if len(targets) != lp.shape[0] or len(lengths) != lp.shape[0]:
        raise ad.ShapeError(f"ctc_loss: batch of {lp.shape[0]} but {len(targets)} targets, {len(lengths)} lengths")
    total = 0.0
    grad = np.zeros(lp.shape, dtype=np.float64)
    for i, (tgt, n) in enumerate(zip(targets, lengths)):
        tgt = [int(x) for x in tgt]
        if any(x < 0 or x >= n_cls or x == blank for x in tgt):
            raise ValueError(f"ctc_loss: target ids must be non-blank classes, got {tgt}")
        try:
            nll, g = ctc_forward_backward(lp[i, :n].astype(np.float64), tgt, blank)
        except InfeasibleTargetError as exc:
            raise InfeasibleTargetError(f"utterance {i}: {exc}") from None
        total += nll
        grad[i, :n] = g
    b = lp.shape[0]
    out = np.asarray(total / b, dtype=log_probs.dtype)
    grad = (grad / b).astype(log_probs.dtype)
    if single:
        grad = grad[0]
    return ad.apply_op("ctc_loss", out, (log_probs,), lambda g: (g * grad,))


def ctc_greedy_decode(log_probs: np.ndarray, blank: int | None = None) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    blank = lp.shape[-1] - 1 if blank is None else blank
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def stage1_loss(aux_losses: Mapping[str, Tensor], weights: Mapping[str, float]) -> Tensor:
    """Weighted sum of the auxiliary-task losses; emotion is not part of it."""
    if set(aux_losses) != set(weights):
        raise ValueError(f"loss weights cover {sorted(weights)} but enabled tasks are {sorted(aux_losses)}")
    if not aux_losses:
        raise ValueError("stage 1 needs at least one auxiliary task")
    if any(w < 0 for w in weights.values()):
        raise ValueError(f"loss weights must be non-negative: {dict(weights)}")
    if not any(w > 0 for w in weights.values()):
        raise ValueError("at least one stage-1 loss weight must be positive")
    total = None
    for task in sorted(aux_losses):
        term = aux_losses[task] * float(weights[task])
        total = term if total is None else total + term
    return total


def stage2_loss(ser_loss: Tensor) -> Tensor:
    return ser_loss


# ---------------------------------------------------------------- heads

class ClassifierHead(Module):
    """mean-pool -> affine -> relu (hidden tap) -> affine."""

    def __init__(self, task: str, d_in: int, d_a: int, n_classes: int,
                 rng: np.random.Generator, dtype=np.float64) -> None:
        self.task = task
        self.fc1 = Linear(f"heads.{task}.fc1", d_in, d_a, rng, dtype)
        self.fc2 = Linear(f"heads.{task}.fc2", d_a, n_classes, rng, dtype)

    def __call__(self, feats: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        hidden = ad.relu(self.fc1(masked_mean_pool(feats, mask)))
        return self.fc2(hidden), hidden


class AsrHead(Module):
    """Per-frame affine -> relu -> affine over vocab + blank (blank last)."""

    def __init__(self, d_in: int, d_a: int, vocab_size: int,
                 rng: np.random.Generator, dtype=np.float64) -> None:
        self.task = "asr"
        self.vocab_size = vocab_size
        self.fc1 = Linear("heads.asr.fc1", d_in, d_a, rng, dtype)
        self.fc2 = Linear("heads.asr.fc2", d_a, vocab_size + 1, rng, dtype)

    def __call__(self, feats: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        frames = ad.relu(self.fc1(feats))
        log_probs = ad.log_softmax(self.fc2(frames), axis=-1)
        return log_probs, masked_mean_pool(frames, mask)


class SerHead(Module):
    """Two FC layers with dropout between them over a pooled feature vector."""

    def __init__(self, d_in: int, hidden: int, n_classes: int, dropout: float,
                 rng: np.random.Generator, dtype=np.float64) -> None:
        self.fc1 = Linear("heads.ser.fc1", d_in, hidden, rng, dtype)
        self.fc2 = Linear("heads.ser.fc2", hidden, n_classes, rng, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        h = ad.dropout(ad.relu(self.fc1(x)), self.dropout, rng, training)
        return self.fc2(h)
