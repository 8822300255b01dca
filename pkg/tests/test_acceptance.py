"""Acceptance suite: one test per primary criterion.

Each test records a PASS/FAIL line that pytest prints in an "acceptance
criteria" section at the end of the run. Running this file directly
(``python tests/test_acceptance.py``) prints the same lines.

The learnability check trains the full 12-layer model three times and takes
roughly 30 minutes on one CPU core.
"""
from __future__ import annotations

import itertools
import json
import sys
import time
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from metaser import gradcheck
from metaser.autodiff import Tensor
from metaser.cli import main as cli_main
from metaser.cli import trend_report
from metaser.data import GenerationConfig, generate_corpus, make_speaker_independent_folds, speaker_gender
from metaser.encoder import EncoderConfig
from metaser.fusion import AriFusion
from metaser.metrics import cer, confusion_matrix, unweighted_accuracy, weighted_accuracy, wer
from metaser.tasks import ctc_feasible, ctc_loss
from metaser.train import (ExperimentConfig, ablation_cells, build_model, run_ablation, run_kfold,
                           train_two_stage)

# Settings for the learnability run. The encoder trains from scratch, so it needs larger
# learning rates than the fine-tuning defaults; TDSA is off because speed shifts move the
# synthetic token tones onto each other (see README).
LEARN_SEEDS = (7, 8, 9)
LEARN_FOLD = 0
LEARN_CFG = dict(stage1_epochs=14, stage2_epochs=6, lr_encoder=1e-3, lr_downstream=3e-2,
                 lr_downstream_stage2=3e-3, lr_schedule="cosine", tdsa=False, folds=(LEARN_FOLD,),
                 lr_aux_heads={"gender": 3e-3, "speaker": 3e-3, "style": 3e-3})
THRESHOLDS = {"UA": 0.90, "gender": 0.95, "style": 0.80, "WER": 0.30}
BUDGET_SECONDS = 30 * 60 * 4  # 30 min on 4 cores, read as core-seconds on this 1-core machine

TINY = ["--set", "encoder.n_layers=3", "--set", "encoder.model_dim=8", "--set", "encoder.ff_dim=12",
        "--set", "encoder.freeze_first_k_stage2=1", "--stage1-epochs", "1", "--stage2-epochs", "1",
        "--aux-dim", "6", "--ser-hidden", "8", "--folds", "0"]


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


# ---------------------------------------------------------------- gradient suite

def test_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run_all(n_seeds=20)
    elapsed = time.perf_counter() - t0
    worst = {}
    for r in results:
        worst[r.suite] = max(worst.get(r.suite, 0.0), r.max_rel_error)
    seeds = {s: sum(r.suite == s for r in results) for s in worst}
    ok = all(r.ok for r in results) and min(seeds.values()) >= 20 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient suite", ok, f"max rel err per suite ({detail}); 20 seeds each; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- CTC oracle

def _brute_ctc(probs: np.ndarray, target: list[int], blank: int) -> float:
    t_len, n_cls = probs.shape
    total = 0.0
    for path in itertools.product(range(n_cls), repeat=t_len):
        out, prev = [], None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        if out == target:
            total += np.prod(probs[np.arange(t_len), path])
    return -np.log(total)


def test_ctc_oracle():
    rng = np.random.default_rng(505)
    worst, n = 0.0, 0
    while n < 500:
        t_len, v, u = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        target = rng.integers(0, v, size=u).tolist()
        if not ctc_feasible(t_len, target):
            continue
        z = rng.normal(scale=2, size=(t_len, v + 1))
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        worst = max(worst, abs(float(ctc_loss(Tensor(lp), target).data) - _brute_ctc(np.exp(lp), target, v)))
        n += 1
    two = float(ctc_loss(Tensor(np.log(np.full((2, 2), 0.5))), [0]).data)
    ok = worst < 1e-10 and abs(two + np.log(0.75)) < 1e-9
    record("CTC oracle", ok, f"{n} instances, max abs err {worst:.1e}; T=2 case {two:.9f}")
    assert ok


# ---------------------------------------------------------------- structure

def test_structural_fidelity():
    enc = EncoderConfig()
    fusion = AriFusion(enc.n_layers)
    width = fusion.out_dim(enc.model_dim)

    corpus = generate_corpus(GenerationConfig(n_utterances=60), seed=3)
    cfg = ExperimentConfig(stage1_epochs=1, stage2_epochs=1, lr_encoder=1e-3, lr_downstream=1e-3,
                           folds=(0,))
    plan = make_speaker_independent_folds(corpus.manifest, cfg.k_folds)
    initial = {p.name: p.data.copy() for p in build_model(cfg, corpus, cfg.seed).parameters()}
    model, _ = train_two_stage(cfg, corpus, plan, 0)
    after1 = model.stage1_state
    final = {p.name: p.data for p in model.parameters()}

    def same(a, b, prefix):
        names = [n for n in a if n.startswith(prefix)]
        return bool(names) and all(np.array_equal(a[n], b[n]) for n in names)

    frozen2 = ["encoder.frontend."] + [f"encoder.layers.{i}." for i in range(1, enc.freeze_first_k_stage2 + 1)]
    s1_front = same(initial, after1, "encoder.frontend.")
    s2_frozen = all(same(after1, final, p) for p in frozen2)
    s1_layers = sum(not same(initial, after1, f"encoder.layers.{i}.") for i in range(1, 13))
    s2_layers = sum(not same(after1, final, f"encoder.layers.{i}.") for i in range(1, 13))
    ok = width == 2 * enc.model_dim and s1_front and s2_frozen and s1_layers == 12 and s2_layers == 8
    record("structural fidelity", ok,
           f"ARI width {width} (2d={2 * enc.model_dim}); stage 1 frontend unchanged={s1_front}, "
           f"layers moved {s1_layers}/12; stage 2 frontend+layers 1-4 unchanged={s2_frozen}, "
           f"layers moved {s2_layers}/12")
    assert ok


# ---------------------------------------------------------------- protocol

def test_protocol_fidelity():
    corpus = generate_corpus(GenerationConfig(), seed=7)
    plan = make_speaker_independent_folds(corpus.manifest, 5)
    held = [sorted(plan.test_speakers(f)) for f in range(5)]
    pairs_ok = all(len(h) == 2 and {speaker_gender(s) for s in h} == {"male", "female"} for h in held)
    disjoint = sorted(s for h in held for s in h) == sorted(corpus.manifest.speakers)
    no_leak = True
    for f in range(5):
        tr, te = plan.split(corpus.manifest, f)
        no_leak &= not ({u.speaker_id for u in corpus.subset(tr)} & {u.speaker_id for u in corpus.subset(te)})

    small = generate_corpus(GenerationConfig(n_utterances=60), seed=3)
    cfg = ExperimentConfig(encoder=EncoderConfig(n_layers=3, model_dim=8, ff_dim=12, freeze_first_k_stage2=1),
                           stage1_epochs=1, stage2_epochs=1, aux_dim=6, ser_hidden=8,
                           lr_encoder=1e-3, lr_downstream=1e-3, aux_metrics_at="final")
    result = run_kfold(cfg, small)
    spk = [f.aux_acc["speaker"] for f in result.folds]
    ok = pairs_ok and disjoint and no_leak and result.ok and spk == [0.0] * 5
    record("protocol fidelity", ok, f"held-out pairs {held}; speaker acc per fold {spk}")
    assert ok


# ---------------------------------------------------------------- metric oracles

def _lev(a, b) -> int:
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


def test_metric_oracles():
    rng = np.random.default_rng(477)
    exact, worst = True, 0.0
    for _ in range(100):
        n = int(rng.integers(1, 80))
        y = rng.integers(0, 4, n)
        p = np.where(rng.random(n) < 0.5, y, rng.integers(0, 4, n))
        cm = confusion_matrix(y, p, 4)
        wa = Fraction(int((y == p).sum()), n)
        rec = [Fraction(int(((y == c) & (p == c)).sum()), int((y == c).sum())) for c in range(4) if (y == c).any()]
        exact &= weighted_accuracy(cm) == float(wa)
        worst = max(worst, abs(unweighted_accuracy(cm) - float(sum(rec) / len(rec))))

        vocab = ["ka", "lu", "mi", "no"]
        refs = [list(rng.choice(vocab, rng.integers(1, 6))) for _ in range(int(rng.integers(1, 4)))]
        hyps = [list(rng.choice(vocab, rng.integers(0, 6))) for _ in refs]
        w = Fraction(sum(_lev(tuple(h), tuple(r)) for h, r in zip(hyps, refs)), sum(map(len, refs)))
        hs, rs = [" ".join(h) for h in hyps], [" ".join(r) for r in refs]
        c = Fraction(sum(_lev(h, r) for h, r in zip(hs, rs)), sum(map(len, rs)))
        exact &= wer(hyps, refs) == float(w) and cer(hyps, refs) == float(c)
    ok = exact and worst < 1e-12
    record("metric oracles", ok, f"100 instances; WA/WER/CER exact={exact}; max UA err {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- learnability

def learnability() -> dict:
    corpus = generate_corpus(GenerationConfig(), seed=7)
    plan = make_speaker_independent_folds(corpus.manifest, 5)
    t0 = time.perf_counter()
    runs = []
    for seed in LEARN_SEEDS:
        cfg = ExperimentConfig(seed=seed, **LEARN_CFG)
        _, res = train_two_stage(cfg, corpus, plan, LEARN_FOLD, seed)
        runs.append({"UA": res.UA, "WA": res.WA, "WER": res.WER, "gender": res.aux_acc["gender"],
                     "style": res.aux_acc["style"], "speaker": res.aux_acc["speaker"],
                     "final_model": {"WER": res.aux_final["WER"], **res.aux_final["aux_acc"]}})
    mean = {k: float(np.mean([r[k] for r in runs])) for k in ("UA", "WA", "WER", "gender", "style")}
    return {"runs": runs, "mean": mean, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_synthetic_learnability():
    out = learnability()
    m = out["mean"]
    checks = {"UA": m["UA"] >= THRESHOLDS["UA"], "gender": m["gender"] >= THRESHOLDS["gender"],
              "style": m["style"] >= THRESHOLDS["style"], "WER": m["WER"] <= THRESHOLDS["WER"],
              "time": out["seconds"] <= BUDGET_SECONDS}
    failed = [k for k, v in checks.items() if not v]
    finals = "; ".join(f"seed {s}: {json.dumps({k: round(v, 3) for k, v in r['final_model'].items()})}"
                       for s, r in zip(LEARN_SEEDS, out["runs"]))
    record("synthetic learnability", not failed,
           f"UA {m['UA']:.3f} WA {m['WA']:.3f} gender {m['gender']:.3f} style {m['style']:.3f} "
           f"WER {m['WER']:.3f} over seeds {LEARN_SEEDS}, fold {LEARN_FOLD}; {out['seconds'] / 60:.1f} min"
           + (f"; failing: {failed}" if failed else ""))
    print(f"aux metrics of the final (post stage 2) models: {finals}")
    assert not failed


# ---------------------------------------------------------------- ablation report

def test_ablation_report(tmp_path):
    corpus = generate_corpus(GenerationConfig(n_utterances=60), seed=3)
    cfg = ExperimentConfig(encoder=EncoderConfig(n_layers=3, model_dim=8, ff_dim=12, freeze_first_k_stage2=1),
                           stage1_epochs=1, stage2_epochs=1, aux_dim=6, ser_hidden=8, folds=(0,),
                           lr_encoder=1e-3, lr_downstream=1e-3)
    cells = ablation_cells(cfg)
    text, report = run_ablation(cfg, corpus, cells)
    rows = text.splitlines()
    complete = len(rows) == len(cells) + 1 == 63 and all(v["ok"] for v in report.values())
    trends = trend_report(report)
    (tmp_path / "ablation_report.json").write_text(json.dumps(trends, indent=2))
    record("ablation report", complete,
           f"{len(rows) - 1}/62 cells generated; trends (informational): {json.dumps(trends, sort_keys=True)}")
    assert complete


# ---------------------------------------------------------------- determinism

def _bytes(path: Path) -> bytes:
    return path.read_bytes()


def test_determinism(tmp_path, monkeypatch):
    import metaser.cli as cli
    few = [("ari", ("gender", "asr"), True), ("weighted_sum", ("style",), False), ("ari", (), False)]
    monkeypatch.setattr(cli, "run_ablation", lambda cfg, corpus: run_ablation(cfg, corpus, few))
    ok = {}
    for name in ("a", "b"):
        assert cli_main(["generate-data", "--out", str(tmp_path / name / "corpus"), "--n-utterances", "60",
                         "--seed", "3"]) == 0
    ok["generate-data"] = all(
        _bytes(p) == _bytes(tmp_path / "b" / "corpus" / p.relative_to(tmp_path / "a" / "corpus"))
        for p in (tmp_path / "a" / "corpus").rglob("*") if p.is_file())
    corpus_dir = str(tmp_path / "a" / "corpus")
    for name in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / name / "run"), "--corpus", corpus_dir, *TINY]) == 0
        assert cli_main(["evaluate", "--run", str(tmp_path / name / "run")]) == 0
        assert cli_main(["ablate", "--out", str(tmp_path / name / "abl"), "--corpus", corpus_dir, *TINY]) == 0
    for rel in ("run/folds.csv", "run/eval.csv", "abl/ablation.csv"):
        ok[rel] = _bytes(tmp_path / "a" / rel) == _bytes(tmp_path / "b" / rel)
    passed = all(ok.values())
    record("determinism", passed, ", ".join(f"{k} identical={v}" for k, v in ok.items()))
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
