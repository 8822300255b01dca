"""Classification and transcription metrics."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


def confusion_matrix(labels: Sequence[int], preds: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def weighted_accuracy(cm: np.ndarray) -> float:
    """Overall fraction correct (trace / total)."""
    total = cm.sum()
    if total == 0:
        raise ValueError("weighted accuracy of an empty confusion matrix")
    return float(np.trace(cm) / total)


def unweighted_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall over classes present in the references."""
    rows = cm.sum(axis=1)
    present = rows > 0
    if not present.any():
        raise ValueError("unweighted accuracy of an empty confusion matrix")
    if not present.all():
        log.warning("classes %s absent from references; UA averages over the remaining %d",
                    np.flatnonzero(~present).tolist(), int(present.sum()))
    return float(np.mean(np.diag(cm)[present] / rows[present]))


def per_class_recall(cm: np.ndarray) -> list[float | None]:
    rows = cm.sum(axis=1)
    return [float(cm[i, i] / rows[i]) if rows[i] else None for i in range(len(rows))]


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit insertion, deletion and substitution costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Total token edit distance over total reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    n = sum(len(r) for r in refs)
    if not refs or n == 0:
        raise ValueError("WER needs a non-empty reference set")
    return sum(edit_distance(list(h), list(r)) for h, r in zip(hyps, refs)) / n


def cer(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Character edit distance of the space-joined token strings."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    hs = [" ".join(h) for h in hyps]
    rs = [" ".join(r) for r in refs]
    n = sum(len(r) for r in rs)
    if not refs or n == 0:
        raise ValueError("CER needs a non-empty reference set")
    return sum(edit_distance(h, r) for h, r in zip(hs, rs)) / n
