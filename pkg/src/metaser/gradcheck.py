"""Finite-difference gradient checks for every composite used by the model.

Each suite builds a random instance at 64-bit precision, takes a fixed
random linear functional of the output as the scalar loss, and compares the
tape gradient with central differences. Small tensors are checked
entrywise. The full model is checked along one random unit direction per
parameter tensor, and the vector of those directional derivatives is
compared as a whole.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, batch_collate
from .fusion import CoAttention, ari_fuse, weighted_sum_fuse
from .model import MultiTaskModel
from .tasks import AUX_TASKS, cross_entropy, ctc_loss, stage1_loss

EPS = 1e-4
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    suite: str
    seed: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with a floor for all-zero gradients."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(num / den)


def _entrywise(loss_fn: Callable[[], Tensor], params: list[Parameter], eps: float) -> float:
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    worst = 0.0
    for p in params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(grads.get(p.name, np.zeros_like(p.data)), numeric))
    return worst


def _directional(loss_fn: Callable[[], Tensor], params: list[Parameter], eps: float,
                 rng: np.random.Generator) -> float:
    with ad.Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    analytic, numeric = [], []
    for p in params:
        u = rng.normal(size=p.shape)
        u /= np.linalg.norm(u)
        orig = p.data.copy()
        p.data = orig + eps * u
        up = float(loss_fn().data)
        p.data = orig - eps * u
        down = float(loss_fn().data)
        p.data = orig
        numeric.append((up - down) / (2 * eps))
        analytic.append(float((grads.get(p.name, np.zeros_like(orig)) * u).sum()))
    # one directional derivative per tensor, compared as a single vector
    return rel_error(np.array(analytic), np.array(numeric))


def _projection(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _param(rng, shape, name, scale=1.0) -> Parameter:
    return Parameter(rng.normal(scale=scale, size=shape), name)


def check_ari(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    n_layers, t, d = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    layers = [_param(rng, (t, d), f"F{i}") for i in range(n_layers)]
    w = _param(rng, (n_layers - 1,), "w")
    proj = Tensor(_projection(rng, (t, 2 * d)))
    return _entrywise(lambda: ad.sum_(ari_fuse(layers, w) * proj), layers + [w], eps)


def check_weighted_sum(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    n_layers, t, d = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    layers = [_param(rng, (t, d), f"F{i}") for i in range(n_layers)]
    v = _param(rng, (n_layers,), "v")
    proj = Tensor(_projection(rng, (t, d)))
    return _entrywise(lambda: ad.sum_(weighted_sum_fuse(layers, v) * proj), layers + [v], eps)


def check_coattention(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    b, d_s, d_a, k = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    co = CoAttention(d_s, d_a, rng)
    ser = _param(rng, (b, d_s), "ser")
    aux = [_param(rng, (b, d_a), f"h{i}") for i in range(k)]
    proj = Tensor(_projection(rng, (b, d_s + k * d_a)))
    params = co.parameters() + [ser] + aux
    return _entrywise(lambda: ad.sum_(co(ser, aux) * proj), params, eps)


def check_cross_entropy(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    b, c = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    logits = _param(rng, (b, c), "logits", scale=2.0)
    labels = rng.integers(0, c, size=b)
    return _entrywise(lambda: cross_entropy(logits, labels), [logits], eps)


def check_ctc(seed: int, eps: float = EPS) -> float:
    """Gradient through log_softmax into raw per-frame scores."""
    rng = np.random.default_rng(seed)
    v = int(rng.integers(1, 4))
    u = int(rng.integers(1, 4))
    target = rng.integers(0, v, size=u).tolist()
    repeats = sum(a == b for a, b in zip(target, target[1:]))
    t = int(rng.integers(u + repeats, u + repeats + 4))
    scores = _param(rng, (t, v + 1), "scores")
    return _entrywise(lambda: ctc_loss(ad.log_softmax(scores, axis=-1), target), [scores], eps)


def tiny_model(rng: np.random.Generator, fusion: str = "ari") -> tuple[MultiTaskModel, EncoderConfig]:
    cfg = EncoderConfig(n_layers=3, model_dim=8, n_heads=2, ff_dim=12, freeze_first_k_stage2=1,
                        frontend_init="random", input_gain=2.0)
    model = MultiTaskModel(cfg, fusion, AUX_TASKS, True, n_speakers=4, vocab_size=3, rng=rng,
                           aux_dim=6, ser_hidden=7, ser_dropout=0.0, dtype=np.float64)
    return model, cfg


def _min_kink_distance(fn: Callable[[], Tensor]) -> float:
    probe: list[float] = []
    ad._kink_probes.append(probe)
    try:
        fn()
    finally:
        ad._kink_probes.remove(probe)
    return min(probe, default=np.inf)


def check_full_model(seed: int, eps: float = EPS, fusion: str | None = None,
                     max_redraws: int = 10) -> float:
    """Stage-1 plus stage-2 loss through the whole model, every parameter trainable.

    A relu input sitting within a few eps of zero makes central differences
    straddle the kink. Such draws are rejected and the instance is redrawn
    from the same seeded stream.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_redraws):
        loss_fn, params = _full_model_instance(rng, seed, fusion)
        if _min_kink_distance(loss_fn) > 10 * eps:
            break
    return _directional(loss_fn, params, eps, rng)


def _full_model_instance(rng, seed, fusion):
    fusion = fusion or ("ari" if seed % 2 == 0 else "weighted_sum")
    model, cfg = tiny_model(rng, fusion)
    for p in model.parameters():
        p.trainable = True
    lengths = rng.integers(160, 240, size=2)
    audio = [rng.uniform(-0.8, 0.8, size=int(n)) for n in lengths]
    batch = batch_collate(audio, cfg)
    frames = batch.frame_mask.sum(axis=1).astype(int)
    targets = [rng.integers(0, 3, size=3).tolist() for _ in lengths]
    labels = {t: rng.integers(0, n, size=len(lengths)) for t, n in
              (("gender", 2), ("speaker", 4), ("style", 2), ("emotion", 4))}
    weights = {"asr": 1.0, "gender": 0.3, "speaker": 0.3, "style": 0.3}

    def loss_fn():
        out = model.forward(batch, with_ser=True, training=False)
        aux = {t: (ctc_loss(out.aux[t], targets, frames.tolist()) if t == "asr"
                   else cross_entropy(out.aux[t], labels[t])) for t in AUX_TASKS}
        return stage1_loss(aux, weights) + cross_entropy(out.ser_logits, labels["emotion"])

    return loss_fn, model.parameters()


SUITES: dict[str, Callable[[int], float]] = {
    "ari": check_ari,
    "weighted_sum": check_weighted_sum,
    "coattention": check_coattention,
    "cross_entropy": check_cross_entropy,
    "ctc": check_ctc,
    "full_model": check_full_model,
}


def run_suite(name: str, seeds) -> list[GradCheckResult]:
    fn = SUITES[name]
    return [GradCheckResult(name, int(s), fn(int(s))) for s in seeds]


def run_all(n_seeds: int = 20, base_seed: int = 0) -> list[GradCheckResult]:
    seeds = range(base_seed, base_seed + n_seeds)
    out = []
    for name in SUITES:
        out.extend(run_suite(name, seeds))
    return out
