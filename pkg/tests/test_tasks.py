import itertools

import numpy as np
import pytest

from metaser import autodiff as ad
from metaser.autodiff import Tensor
from metaser.encoder import EncoderConfig, batch_collate
from metaser.model import MultiTaskModel
from metaser.tasks import (AUX_TASKS, InfeasibleTargetError, cross_entropy, ctc_feasible,
                           ctc_greedy_decode, ctc_loss, stage1_loss, stage2_loss)


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- cross-entropy

def test_ce_uniform_and_limit():
    assert float(cross_entropy(Tensor(np.zeros(4)), 2).data) == pytest.approx(np.log(4), abs=1e-12)
    assert float(cross_entropy(Tensor(np.array([0.0, 800.0, 0.0])), 1).data) < 1e-12


def test_ce_matches_direct_formula(rng):
    for _ in range(100):
        c = int(rng.integers(2, 9))
        z = rng.normal(scale=3, size=c)
        y = int(rng.integers(c))
        ref = -np.log(np.exp(z[y]) / np.exp(z).sum())
        assert abs(float(cross_entropy(Tensor(z), y).data) - ref) < 1e-12
        shifted = float(cross_entropy(Tensor(z + 17.3), y).data)
        assert abs(shifted - ref) < 1e-9


def test_ce_batch_mean_and_errors(rng):
    z = rng.normal(size=(3, 4))
    y = [0, 3, 1]
    ref = np.mean([-_log_softmax(z[i])[y[i]] for i in range(3)])
    assert float(cross_entropy(Tensor(z), y).data) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(z), [0, 4, 1])
    with pytest.raises(ad.ShapeError):
        cross_entropy(Tensor(z), [0, 1])


# ---------------------------------------------------------------- CTC

def brute_force_ctc(probs: np.ndarray, target: list[int], blank: int) -> float:
    """-log of the summed probability of every frame path that collapses to target."""
    t_len, n_cls = probs.shape
    total = 0.0
    for path in itertools.product(range(n_cls), repeat=t_len):
        collapsed, prev = [], None
        for k in path:
            if k != prev and k != blank:
                collapsed.append(k)
            prev = k
        if collapsed == target:
            total += np.prod(probs[np.arange(t_len), path])
    return -np.log(total)


def test_ctc_single_frame():
    lp = np.log(np.full((1, 2), 0.5))
    assert float(ctc_loss(Tensor(lp), [0]).data) == pytest.approx(-np.log(0.5), abs=1e-12)


def test_ctc_two_frames_three_paths():
    lp = np.log(np.full((2, 2), 0.5))
    value = float(ctc_loss(Tensor(lp), [0]).data)
    assert abs(value - (-np.log(0.75))) < 1e-9
    assert value == pytest.approx(0.287682, abs=1e-6)


def test_ctc_matches_exhaustive_enumeration():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 600:
        t_len = int(rng.integers(1, 7))
        v = int(rng.integers(1, 4))
        u = int(rng.integers(1, 4))
        target = rng.integers(0, v, size=u).tolist()
        if not ctc_feasible(t_len, target):
            continue
        lp = _log_softmax(rng.normal(scale=2, size=(t_len, v + 1)))
        got = float(ctc_loss(Tensor(lp), target).data)
        ref = brute_force_ctc(np.exp(lp), target, v)
        assert got >= 0
        assert abs(got - ref) < 1e-10, (t_len, v, target)
        checked += 1


def test_ctc_infeasible_is_explicit():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(Tensor(lp), [0, 0])
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(Tensor(lp), [0, 1, 0])
    assert np.isfinite(ctc_loss(Tensor(np.log(np.full((3, 3), 1 / 3))), [0, 0]).data)
    with pytest.raises(ValueError):
        ctc_loss(Tensor(lp), [2])


def test_ctc_batch_respects_lengths(rng):
    lp = _log_softmax(rng.normal(size=(2, 6, 4)))
    targets, lengths = [[0, 1], [2]], [6, 3]
    ref = np.mean([float(ctc_loss(Tensor(lp[0]), targets[0]).data),
                   float(ctc_loss(Tensor(lp[1, :3]), targets[1]).data)])
    assert float(ctc_loss(Tensor(lp), targets, lengths).data) == pytest.approx(ref, abs=1e-12)


def _frames(ids, n_cls=3):
    lp = np.full((len(ids), n_cls), -5.0)
    lp[np.arange(len(ids)), ids] = 0.0
    return lp


def test_greedy_decode_rules():
    a, b, blank = 0, 1, 2
    assert ctc_greedy_decode(_frames([a, a, blank, b])) == [a, b]
    assert ctc_greedy_decode(_frames([blank, blank])) == []
    assert ctc_greedy_decode(_frames([a, blank, a])) == [a, a]


# ---------------------------------------------------------------- stage losses

def test_stage_loss_arithmetic():
    one = {"gender": Tensor(np.array(0.7))}
    assert float(stage1_loss(one, {"gender": 1.0}).data) == pytest.approx(0.7)
    losses = {"gender": Tensor(np.array(3.0)), "speaker": Tensor(np.array(5.0)),
              "style": Tensor(np.array(0.5))}
    assert float(stage1_loss(losses, {"gender": 0, "speaker": 0, "style": 2}).data) == 1.0
    base = float(stage1_loss(losses, {"gender": 1, "speaker": 1, "style": 1}).data)
    doubled = float(stage1_loss(losses, {"gender": 2, "speaker": 1, "style": 1}).data)
    assert doubled - base == 3.0
    assert float(stage2_loss(Tensor(np.array(1.37))).data) == 1.37


@pytest.mark.parametrize("weights", [{"gender": 1.0}, {"gender": 1, "speaker": 1, "style": 1, "x": 1},
                                     {"gender": 0, "speaker": 0, "style": 0},
                                     {"gender": -1, "speaker": 1, "style": 1}])
def test_stage1_weight_errors(weights):
    losses = {t: Tensor(np.array(1.0)) for t in ("gender", "speaker", "style")}
    with pytest.raises(ValueError):
        stage1_loss(losses, weights)


def _tiny_model(rng, aux=AUX_TASKS):
    cfg = EncoderConfig(n_layers=3, model_dim=8, n_heads=2, ff_dim=12, freeze_first_k_stage2=1)
    return MultiTaskModel(cfg, "ari", aux, True, n_speakers=4, vocab_size=3, rng=rng,
                          aux_dim=6, ser_hidden=7, ser_dropout=0.0), cfg


def test_zero_weight_head_gets_zero_gradient(rng):
    model, cfg = _tiny_model(rng, ("gender", "style"))
    model.configure_stage(1)
    batch = batch_collate([rng.uniform(-1, 1, 320), rng.uniform(-1, 1, 400)], cfg)
    with ad.Tape() as tape:
        out = model.forward(batch, with_ser=False)
        losses = {"gender": cross_entropy(out.aux["gender"], [0, 1]),
                  "style": cross_entropy(out.aux["style"], [1, 1])}
        loss = stage1_loss(losses, {"gender": 0.0, "style": 1.0})
    grads = tape.backward(loss)
    for name, g in grads.items():
        if name.startswith("heads.gender."):
            assert not g.any()
    assert any(np.abs(g).max() > 0 for n, g in grads.items() if n.startswith("heads.style."))
    assert any(np.abs(g).max() > 0 for n, g in grads.items() if n.startswith("encoder.layers."))


def test_stage2_leaves_aux_heads_without_gradient(rng):
    model, cfg = _tiny_model(rng)
    model.configure_stage(2)
    batch = batch_collate([rng.uniform(-1, 1, 320)], cfg)
    with ad.Tape() as tape:
        loss = stage2_loss(cross_entropy(model.forward(batch).ser_logits, [2]))
    grads = tape.backward(loss)
    assert not any(n.startswith("heads.") and not n.startswith("heads.ser.") for n in grads)
    assert not any(n.startswith(("encoder.frontend.", "encoder.layers.1.")) for n in grads)
    assert any(n.startswith("heads.ser.") for n in grads)
    assert any(n.startswith("coattn.") for n in grads)
    assert "fusion.ari.w" in grads
