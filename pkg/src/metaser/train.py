"""Two-stage training, evaluation, k-fold runs and the ablation matrix."""
from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import (EMOTIONS, STYLES, Corpus, FoldPlan, GenerationConfig, Utterance,
                   generate_corpus, make_speaker_independent_folds, read_corpus, tdsa_rates,
                   tdsa_speed_perturb)
from .encoder import (Batch, EncoderConfig, collate_features, load_checkpoint, load_into,
                      save_checkpoint)
from .metrics import (cer, confusion_matrix, edit_distance, per_class_recall,
                      unweighted_accuracy, weighted_accuracy, wer)
from .model import MultiTaskModel
from .optim import Optimizer
from .tasks import AUX_TASKS, DEFAULT_LOSS_WEIGHTS, cross_entropy, ctc_greedy_decode, ctc_loss, stage1_loss

log = logging.getLogger(__name__)

ABLATION_HEADER = ("fusion", "tasks", "coattn", "UA", "WA", "CER", "WER",
                   "gender_acc", "style_acc", "speaker_acc")
FOLD_HEADER = ("fold", "test_speakers", "n_test", "UA", "WA", "CER", "WER",
               "gender_acc", "style_acc", "speaker_acc")


class TrainingDiverged(RuntimeError):
    """A loss or activation became non-finite during training."""


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    corpus_seed: int = 7
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: str = "ari"
    coattention: bool = True
    aux_tasks: tuple[str, ...] = AUX_TASKS
    loss_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    lr_encoder: float = 1e-5
    lr_downstream: float = 1e-4
    lr_encoder_stage2: float | None = None      # None: same as lr_encoder
    lr_downstream_stage2: float | None = None   # None: same as lr_downstream
    # per-task rate for auxiliary heads, overriding the downstream rate in both stages
    lr_aux_heads: dict[str, float] = field(default_factory=dict)
    optimizer: str = "adam"
    lr_schedule: str = "constant"   # or "cosine": decay to zero over each stage
    batch_size: int = 4
    eval_batch_size: int = 8
    k_folds: int = 5
    folds: tuple[int, ...] | None = None
    seed: int = 7
    tdsa: bool = True
    tdsa_policy: str = "sample"
    aux_dim: int = 32
    ser_hidden: int = 64
    ser_dropout: float = 0.1
    freeze_aux_heads_stage2: bool = True
    # "stage1": score auxiliary tasks on the stage-1 model, whose heads they trained;
    # "final": score them after stage 2 as well. Final-model values are always kept in aux_final.
    aux_metrics_at: str = "stage1"
    precision: str = "float32"
    workers: int = 1

    def validate(self) -> None:
        self.encoder.validate()
        if self.fusion not in ("ari", "weighted_sum"):
            raise ValueError(f"fusion must be 'ari' or 'weighted_sum', got {self.fusion!r}")
        bad = set(self.aux_tasks) - set(AUX_TASKS)
        if bad:
            raise ValueError(f"unknown auxiliary tasks {sorted(bad)}")
        missing = [t for t in self.aux_tasks if t not in self.loss_weights]
        if missing:
            raise ValueError(f"no loss weight for enabled tasks {missing}")
        if self.aux_tasks and not any(self.loss_weights[t] > 0 for t in self.aux_tasks):
            raise ValueError("at least one enabled auxiliary task needs a positive loss weight")
        unknown_heads = set(self.lr_aux_heads) - set(AUX_TASKS)
        if unknown_heads:
            raise ValueError(f"lr_aux_heads names unknown tasks {sorted(unknown_heads)}")
        for v in (self.lr_encoder_stage2, self.lr_downstream_stage2, *self.lr_aux_heads.values()):
            if v is not None and not v > 0:
                raise ValueError(f"learning rates must be positive, got {v}")
        if self.lr_encoder <= 0 or self.lr_downstream <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.tdsa_policy not in ("sample", "expand"):
            raise ValueError(f"unknown tdsa_policy {self.tdsa_policy!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.aux_metrics_at not in ("stage1", "final"):
            raise ValueError(f"aux_metrics_at must be 'stage1' or 'final', got {self.aux_metrics_at!r}")
        if not 0 <= self.ser_dropout < 1:
            raise ValueError("ser_dropout must lie in [0, 1)")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def active_weights(self) -> dict[str, float]:
        return {t: float(self.loss_weights[t]) for t in self.aux_tasks}

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        kw = dict(d)
        if "generation" in kw:
            kw["generation"] = GenerationConfig.from_dict(kw["generation"])
        if "encoder" in kw:
            kw["encoder"] = EncoderConfig.from_dict(kw["encoder"])
        for key in ("aux_tasks", "folds"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    if cfg.corpus is not None:
        return read_corpus(cfg.corpus)
    return generate_corpus(cfg.generation, cfg.corpus_seed)


def build_model(cfg: ExperimentConfig, corpus: Corpus, seed: int) -> MultiTaskModel:
    rng = np.random.default_rng([seed, 17])
    return MultiTaskModel(cfg.encoder, cfg.fusion, cfg.aux_tasks, cfg.coattention,
                          corpus.manifest.config.n_speakers, len(corpus.vocab), rng,
                          aux_dim=cfg.aux_dim, ser_hidden=cfg.ser_hidden,
                          ser_dropout=cfg.ser_dropout, dtype=cfg.dtype)


# ---------------------------------------------------------------- labels

@dataclass
class Labels:
    emotion: np.ndarray
    gender: np.ndarray
    speaker: np.ndarray
    style: np.ndarray
    tokens: list[list[int]]


def encode_labels(utts: Sequence[Utterance], vocab: Sequence[str]) -> Labels:
    tok_id = {t: i for i, t in enumerate(vocab)}
    return Labels(
        emotion=np.array([EMOTIONS.index(u.emotion) for u in utts]),
        gender=np.array([0 if u.gender == "male" else 1 for u in utts]),
        speaker=np.array([u.speaker_id for u in utts]),
        style=np.array([STYLES.index(u.style) for u in utts]),
        tokens=[[tok_id[t] for t in u.transcript] for u in utts],
    )


def _task_loss(task: str, pred: ad.Tensor, labels: Labels, frames: np.ndarray) -> ad.Tensor:
    if task == "asr":
        return ctc_loss(pred, labels.tokens, frames.tolist())
    return cross_entropy(pred, getattr(labels, task))


# ---------------------------------------------------------------- training

def _lr_fn(cfg: ExperimentConfig, stage: int = 1):
    enc, down = cfg.lr_encoder, cfg.lr_downstream
    if stage == 2:
        enc = cfg.lr_encoder if cfg.lr_encoder_stage2 is None else cfg.lr_encoder_stage2
        down = cfg.lr_downstream if cfg.lr_downstream_stage2 is None else cfg.lr_downstream_stage2

    heads = {f"heads.{t}.": float(v) for t, v in cfg.lr_aux_heads.items()}

    def lr(name: str) -> float:
        if name.startswith("encoder."):
            return enc
        for prefix, v in heads.items():
            if name.startswith(prefix):
                return v
        return down
    return lr


class FeatureCache:
    """Frontend outputs keyed by (utterance id, TDSA rate).

    Sound only while the frontend is frozen, which both stages guarantee.
    """

    def __init__(self, model: MultiTaskModel) -> None:
        self.model = model
        self._store: dict[tuple[str, int], np.ndarray] = {}

    def get(self, utt: Utterance, rate: int = 100) -> np.ndarray:
        key = (utt.utterance_id, rate)
        feats = self._store.get(key)
        if feats is None:
            if any(p.trainable for p in self.model.encoder.frontend.parameters()):
                raise RuntimeError("frontend features cannot be cached while the frontend trains")
            audio = utt.audio if rate == 100 else tdsa_speed_perturb(utt.audio, rate)
            feats = self._store[key] = self.model.encoder.frontend_features(audio)
        return feats

    def batch(self, utts: Sequence[Utterance], rates: Sequence[int], dtype) -> Batch:
        feats = [self.get(u, r) for u, r in zip(utts, rates)]
        return collate_features(feats, [len(u.audio) for u in utts], dtype)


def _bucketed_batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, sort by length inside windows of 8 batches, then shuffle batch order."""
    order = rng.permutation(len(lengths))
    window = batch_size * 8
    batches = []
    for start in range(0, len(order), window):
        chunk = order[start:start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _train_stage(model: MultiTaskModel, stage: int, utts: Sequence[Utterance], vocab,
                 cfg: ExperimentConfig, epochs: int, rng: np.random.Generator,
                 cache: FeatureCache | None = None) -> list[float]:
    model.configure_stage(stage, cfg.freeze_aux_heads_stage2)
    cache = cache or FeatureCache(model)
    base = _lr_fn(cfg, stage)
    factor = [1.0]
    opt = Optimizer(model.parameters(), lambda name: base(name) * factor[0], rule=cfg.optimizer)
    lengths = np.array([len(u.audio) for u in utts])
    per_epoch = sum(-(-len(lengths[i:i + cfg.batch_size * 8]) // cfg.batch_size)
                    for i in range(0, len(lengths), cfg.batch_size * 8))
    total_steps, done = epochs * per_epoch, 0
    curve = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for bi, idx in enumerate(_bucketed_batches(lengths, cfg.batch_size, rng)):
            if cfg.lr_schedule == "cosine":
                factor[0] = 0.5 * (1.0 + np.cos(np.pi * done / total_steps))
            done += 1
            kept, rates = [], []
            for i in idx:
                rs = tdsa_rates(rng, policy=cfg.tdsa_policy) if cfg.tdsa else [100]
                kept.extend([utts[i]] * len(rs))
                rates.extend(rs)
            labels = encode_labels(kept, vocab)
            batch = cache.batch(kept, rates, cfg.dtype)
            frames = batch.frame_mask.sum(axis=1).astype(int)
            try:
                with ad.Tape() as tape:
                    out = model.forward(batch, with_ser=stage == 2, training=True, rng=rng)
                    if stage == 1:
                        losses = {t: _task_loss(t, out.aux[t], labels, frames) for t in model.aux_tasks}
                        loss = stage1_loss(losses, cfg.active_weights)
                    else:
                        loss = cross_entropy(out.ser_logits, labels.emotion)
                grads = tape.backward(loss)
                opt.step(grads)
            except ad.NumericError as exc:
                raise TrainingDiverged(f"stage {stage}, epoch {epoch + 1}, batch {bi + 1}: {exc}") from exc
            total += float(loss.data) * len(kept)
            count += len(kept)
        curve.append(total / count)
        if not np.isfinite(curve[-1]):
            raise TrainingDiverged(f"stage {stage}, epoch {epoch + 1}: loss is {curve[-1]}")
        log.info("stage %d epoch %d/%d loss %.4f", stage, epoch + 1, epochs, curve[-1])
    return curve


@dataclass
class FoldResult:
    fold: int
    test_speakers: list[int]
    n_test: int
    confusion: list[list[int]]
    WA: float
    UA: float
    per_class_recall: list[float | None]
    aux_correct: dict[str, int]
    aux_acc: dict[str, float]
    edit_chars: int = 0
    ref_chars: int = 0
    edit_tokens: int = 0
    ref_tokens: int = 0
    CER: float | None = None
    WER: float | None = None
    fusion_weights: list[float] = field(default_factory=list)
    aux_final: dict = field(default_factory=dict)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    wall_clock: float = 0.0


def evaluate(model: MultiTaskModel, utts: Sequence[Utterance], vocab: Sequence[str],
             cfg: ExperimentConfig, train_speakers=None, cache: FeatureCache | None = None) -> dict:
    """Metrics on a test split. No augmentation, no dropout, no tape."""
    if not utts:
        raise ValueError("evaluation split is empty")
    if train_speakers is not None:
        leak = set(train_speakers) & {u.speaker_id for u in utts}
        if leak:
            raise AssertionError(f"speaker leakage: {sorted(leak)} appear in train and test")
    labels = encode_labels(utts, vocab)
    cache = cache or FeatureCache(model)
    ser_pred, aux_pred, hyps = [], {t: [] for t in model.aux_tasks if t != "asr"}, []
    for start in range(0, len(utts), cfg.eval_batch_size):
        chunk = utts[start:start + cfg.eval_batch_size]
        batch = cache.batch(chunk, [100] * len(chunk), cfg.dtype)
        out = model.forward(batch, with_ser=True, training=False)
        ser_pred.extend(out.ser_logits.data.argmax(axis=-1).tolist())
        for t in aux_pred:
            aux_pred[t].extend(out.aux[t].data.argmax(axis=-1).tolist())
        if "asr" in out.aux:
            frames = batch.frame_mask.sum(axis=1).astype(int)
            for i, n in enumerate(frames):
                hyps.append([vocab[k] for k in ctc_greedy_decode(out.aux["asr"].data[i, :n])])
    cm = confusion_matrix(labels.emotion, ser_pred, len(EMOTIONS))
    res = {"confusion": cm.tolist(), "WA": weighted_accuracy(cm), "UA": unweighted_accuracy(cm),
           "per_class_recall": per_class_recall(cm), "aux_correct": {}, "aux_acc": {}}
    for t, preds in aux_pred.items():
        correct = int((np.asarray(preds) == getattr(labels, t)).sum())
        res["aux_correct"][t] = correct
        res["aux_acc"][t] = correct / len(utts)
    if hyps:
        refs = [list(u.transcript) for u in utts]
        res["edit_tokens"] = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
        res["ref_tokens"] = sum(len(r) for r in refs)
        res["edit_chars"] = sum(edit_distance(" ".join(h), " ".join(r)) for h, r in zip(hyps, refs))
        res["ref_chars"] = sum(len(" ".join(r)) for r in refs)
        res["WER"] = wer(hyps, refs)
        res["CER"] = cer(hyps, refs)
        res["hypotheses"] = [" ".join(h) for h in hyps]
    return res


def train_two_stage(cfg: ExperimentConfig, corpus: Corpus, plan: FoldPlan, fold: int,
                    seed: int | None = None) -> tuple[MultiTaskModel, FoldResult]:
    """Stage 1 on the auxiliary losses, then stage 2 on emotion only.

    With no auxiliary tasks stage 1 is skipped entirely.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    train_ids, test_ids = plan.split(corpus.manifest, fold)
    train_utts, test_utts = corpus.subset(train_ids), corpus.subset(test_ids)
    train_speakers = sorted({u.speaker_id for u in train_utts})
    model = build_model(cfg, corpus, seed)
    model.restrict_speakers(train_speakers)
    rng = np.random.default_rng([seed, 1009, fold])
    cache = FeatureCache(model)
    curves = {}
    aux_res = None
    if model.aux_tasks and cfg.stage1_epochs > 0:
        curves["stage1"] = _train_stage(model, 1, train_utts, corpus.vocab, cfg,
                                        cfg.stage1_epochs, rng, cache)
        if cfg.aux_metrics_at == "stage1":
            model.stage1_state = {p.name: p.data.copy() for p in model.parameters()}
            aux_res = evaluate(model, test_utts, corpus.vocab, cfg, train_speakers, cache)
    curves["stage2"] = _train_stage(model, 2, train_utts, corpus.vocab, cfg, cfg.stage2_epochs, rng, cache)
    res = combine_results(evaluate(model, test_utts, corpus.vocab, cfg, train_speakers, cache), aux_res)
    return model, _fold_result(fold, plan, res, model, curves, time.perf_counter() - t0)


_AUX_KEYS = ("aux_correct", "aux_acc", "edit_chars", "ref_chars", "edit_tokens", "ref_tokens",
             "WER", "CER", "hypotheses")


def combine_results(final: dict, stage1: dict | None) -> dict:
    """SER metrics from the final model, auxiliary metrics from ``stage1`` when given."""
    out = dict(final)
    out["aux_final"] = {k: final[k] for k in ("aux_acc", "WER", "CER") if k in final}
    if stage1 is not None:
        for k in _AUX_KEYS:
            out.pop(k, None)
            if k in stage1:
                out[k] = stage1[k]
    return out


def _fold_result(fold: int, plan: FoldPlan, res: dict, model: MultiTaskModel,
                 curves: dict, wall: float) -> FoldResult:
    return FoldResult(
        fold=fold, test_speakers=sorted(plan.test_speakers(fold)), n_test=int(np.sum(res["confusion"])),
        confusion=res["confusion"], WA=res["WA"], UA=res["UA"],
        per_class_recall=res["per_class_recall"], aux_correct=res["aux_correct"],
        aux_acc=res["aux_acc"], edit_chars=res.get("edit_chars", 0), ref_chars=res.get("ref_chars", 0),
        edit_tokens=res.get("edit_tokens", 0), ref_tokens=res.get("ref_tokens", 0),
        CER=res.get("CER"), WER=res.get("WER"), fusion_weights=model.fusion.weights(),
        aux_final=res.get("aux_final", {}), loss_curves=curves, wall_clock=wall)


def evaluate_checkpoints(cfg: ExperimentConfig, ckpt_dir: str | Path,
                         corpus: Corpus | None = None) -> RunResult:
    """Re-score saved fold checkpoints on their held-out speakers."""
    cfg.validate()
    corpus = corpus if corpus is not None else load_corpus(cfg)
    plan = make_speaker_independent_folds(corpus.manifest, cfg.k_folds)
    folds = list(cfg.folds) if cfg.folds is not None else list(range(cfg.k_folds))
    results, failed = [], {}
    for fold in folds:
        t0 = time.perf_counter()
        try:
            train_ids, test_ids = plan.split(corpus.manifest, fold)
            train_speakers = sorted({u.speaker_id for u in corpus.subset(train_ids)})
            test_utts = corpus.subset(test_ids)

            def score(path):
                model = build_model(cfg, corpus, cfg.seed)
                load_into(model.parameters(), load_checkpoint(path))
                model.restrict_speakers(train_speakers)
                model.encoder.frontend.set_trainable(False)
                return model, evaluate(model, test_utts, corpus.vocab, cfg, train_speakers)

            model, res = score(Path(ckpt_dir) / f"fold{fold}.ckpt")
            stage1 = Path(ckpt_dir) / f"fold{fold}.stage1.ckpt"
            aux_res = score(stage1)[1] if stage1.exists() else None
            res = combine_results(res, aux_res)
            results.append(_fold_result(fold, plan, res, model, {}, time.perf_counter() - t0))
        except Exception as exc:  # noqa: BLE001 - report the fold, keep the others
            log.error("fold %d failed: %s", fold, exc)
            failed[fold] = f"{type(exc).__name__}: {exc}"
    return RunResult(cfg.to_dict(), results, failed)


# ---------------------------------------------------------------- k-fold

@dataclass
class RunResult:
    config: dict
    folds: list[FoldResult]
    failed: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed

    def pooled_confusion(self) -> np.ndarray:
        return np.sum([np.asarray(f.confusion) for f in self.folds], axis=0)

    def aggregate(self) -> dict:
        if not self.folds:
            return {}
        cm = self.pooled_confusion()
        n = sum(f.n_test for f in self.folds)
        agg = {"WA": weighted_accuracy(cm), "UA": unweighted_accuracy(cm), "confusion": cm.tolist(),
               "per_class_recall": per_class_recall(cm), "n_test": n,
               "mean_WA": float(np.mean([f.WA for f in self.folds])),
               "mean_UA": float(np.mean([f.UA for f in self.folds]))}
        for t in ("gender", "style", "speaker"):
            if all(t in f.aux_correct for f in self.folds):
                agg[f"{t}_acc"] = sum(f.aux_correct[t] for f in self.folds) / n
        ref_t = sum(f.ref_tokens for f in self.folds)
        if ref_t:
            agg["WER"] = sum(f.edit_tokens for f in self.folds) / ref_t
            agg["CER"] = sum(f.edit_chars for f in self.folds) / sum(f.ref_chars for f in self.folds)
        return agg

    def to_dict(self) -> dict:
        return {"config": self.config, "aggregate": self.aggregate(), "failed": self.failed,
                "folds": [dataclasses.asdict(f) for f in self.folds]}


def _fold_job(args):
    cfg_dict, fold, corpus, ckpt_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    plan = make_speaker_independent_folds(corpus.manifest, cfg.k_folds)
    model, result = train_two_stage(cfg, corpus, plan, fold)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(ckpt_dir) / f"fold{fold}.ckpt", model.parameters())
        if model.stage1_state is not None:
            _save_state(Path(ckpt_dir) / f"fold{fold}.stage1.ckpt", model, model.stage1_state)
    return result


def _save_state(path: Path, model: MultiTaskModel, state: dict[str, np.ndarray]) -> None:
    current = {p.name: p.data for p in model.parameters()}
    try:
        for p in model.parameters():
            p.data = state[p.name]
        save_checkpoint(path, model.parameters())
    finally:
        for p in model.parameters():
            p.data = current[p.name]


def run_kfold(cfg: ExperimentConfig, corpus: Corpus | None = None,
              checkpoint_dir: str | Path | None = None) -> RunResult:
    """Train and evaluate every requested fold from a fresh initialisation.

    With ``checkpoint_dir`` the trained parameters of fold f land in
    ``fold{f}.ckpt`` there.
    """
    cfg.validate()
    corpus = corpus if corpus is not None else load_corpus(cfg)
    plan = make_speaker_independent_folds(corpus.manifest, cfg.k_folds)
    folds = list(cfg.folds) if cfg.folds is not None else list(range(cfg.k_folds))
    results: dict[int, FoldResult] = {}
    failed: dict[int, str] = {}
    jobs = [(cfg.to_dict(), f, corpus, checkpoint_dir) for f in folds]
    if cfg.workers > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {f: pool.submit(_fold_job, job) for f, job in zip(folds, jobs)}
            for f, fut in futures.items():
                try:
                    results[f] = fut.result()
                except Exception as exc:  # noqa: BLE001 - a failed fold must not lose the others
                    failed[f] = f"{type(exc).__name__}: {exc}"
    else:
        for f, job in zip(folds, jobs):
            try:
                results[f] = _fold_job(job)
            except Exception as exc:  # noqa: BLE001
                log.error("fold %d failed: %s", f, exc)
                failed[f] = f"{type(exc).__name__}: {exc}"
    return RunResult(cfg.to_dict(), [results[f] for f in sorted(results)], failed)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def fold_rows_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FOLD_HEADER)
    for f in result.folds:
        w.writerow([f.fold, " ".join(map(str, f.test_speakers)), f.n_test, _fmt(f.UA), _fmt(f.WA),
                    _fmt(f.CER), _fmt(f.WER), _fmt(f.aux_acc.get("gender")),
                    _fmt(f.aux_acc.get("style")), _fmt(f.aux_acc.get("speaker"))])
    agg = result.aggregate()
    if agg:
        w.writerow(["pooled", "", agg["n_test"], _fmt(agg["UA"]), _fmt(agg["WA"]), _fmt(agg.get("CER")),
                    _fmt(agg.get("WER")), _fmt(agg.get("gender_acc")), _fmt(agg.get("style_acc")),
                    _fmt(agg.get("speaker_acc"))])
    return buf.getvalue()


def write_run(result: RunResult, out_dir: str | Path) -> Path:
    """Config snapshot, per-fold CSV, full JSON results, fusion weights and loss curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config, indent=2, sort_keys=True) + "\n")
    (out / "folds.csv").write_text(fold_rows_csv(result))
    (out / "results.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    weights = {str(f.fold): f.fusion_weights for f in result.folds}
    (out / "fusion_weights.json").write_text(json.dumps(
        {"mode": result.config["fusion"], "per_fold": weights}, indent=2, sort_keys=True) + "\n")
    with open(out / "loss_curves.jsonl", "w") as fh:
        for f in result.folds:
            fh.write(json.dumps({"fold": f.fold, **f.loss_curves}, sort_keys=True) + "\n")
    return out


# ---------------------------------------------------------------- ablation

def ablation_cells(base: ExperimentConfig) -> list[tuple[str, tuple[str, ...], bool]]:
    """fusion x all task subsets x co-attention (forced off for the empty subset)."""
    cells = []
    for fusion in ("ari", "weighted_sum"):
        for r in range(len(AUX_TASKS) + 1):
            for subset in itertools.combinations(AUX_TASKS, r):
                if subset:
                    cells.append((fusion, subset, True))
                    cells.append((fusion, subset, False))
                else:
                    cells.append((fusion, subset, False))
    return cells


def run_ablation(base: ExperimentConfig, corpus: Corpus | None = None,
                 cells: Sequence[tuple[str, tuple[str, ...], bool]] | None = None) -> tuple[str, dict]:
    """Run every cell and return (CSV text, per-cell aggregates).

    A failing cell leaves its metric fields empty; the other cells still run.
    """
    corpus = corpus if corpus is not None else load_corpus(base)
    cells = ablation_cells(base) if cells is None else cells
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    report = {}
    for fusion, tasks, coattn in cells:
        cfg = dataclasses.replace(base, fusion=fusion, aux_tasks=tuple(tasks), coattention=coattn)
        key = f"{fusion}|{'+'.join(tasks) or 'none'}|{'on' if coattn else 'off'}"
        try:
            agg = run_kfold(cfg, corpus)
            ok = agg.ok
            agg = agg.aggregate()
        except Exception as exc:  # noqa: BLE001 - the matrix must complete other cells
            log.error("ablation cell %s failed: %s", key, exc)
            agg, ok = {}, False
        report[key] = {"ok": ok, **{k: agg.get(k) for k in ("UA", "WA", "CER", "WER", "gender_acc",
                                                          "style_acc", "speaker_acc")}}
        w.writerow([fusion, "+".join(tasks) or "none", "on" if coattn else "off",
                    _fmt(agg.get("UA")), _fmt(agg.get("WA")), _fmt(agg.get("CER")), _fmt(agg.get("WER")),
                    _fmt(agg.get("gender_acc")), _fmt(agg.get("style_acc")), _fmt(agg.get("speaker_acc"))])
    return buf.getvalue(), report
