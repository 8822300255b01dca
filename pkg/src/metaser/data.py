"""Synthetic speech-like corpus, speed perturbation and speaker-independent folds.

Each utterance is a sum of two parts. A "voice" tone carries the speaker
(per-speaker fundamental, low band for male and high band for female) and the
emotion (amplitude envelope, level and vibrato depth). A sequence of dual-tone
segments carries the transcript, one frequency pair per vocabulary token;
the speaking style decides how those segments are laid out in time, and
improvised speech also breaks the voice with a few hesitation pauses.
"""
from __future__ import annotations

import json
import struct
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMOTIONS = ("neutral", "happy", "angry", "sad")
GENDERS = ("male", "female")
STYLES = ("improvised", "scripted")
DEFAULT_VOCAB = ("ka", "lu", "mi", "no", "pe", "ri", "so", "ta")
TDSA_RATES = (80, 100, 120)
MANIFEST_FIELDS = ("id", "path", "num_samples", "sample_rate", "speaker", "gender",
                   "style", "emotion", "transcript")

# emotion -> (level, envelope kind, vibrato depth as a fraction of f0)
_EMOTION_PARAMS = {
    "neutral": (0.45, "flat", 0.0),
    "happy": (0.6, "tremolo", 0.08),
    "angry": (0.8, "bursts", 0.03),
    "sad": (0.25, "decay", 0.0),
}
# candidate frequencies for token tones; tokens use distinct pairs
_VOICE_MIX = 0.4
# token burst length range in seconds per style
_BURST_SECONDS = {"scripted": (0.012, 0.012), "improvised": (0.024, 0.036)}
_TOKEN_FREQS = (650.0, 900.0, 1150.0, 1400.0, 1650.0)
# improvised speech: number of hesitation pauses, each a fraction of the utterance
_PAUSES = (3, 4)
_PAUSE_FRACTION = (0.08, 0.14)


class CorpusError(Exception):
    """Malformed or inconsistent corpus files."""


@dataclass
class GenerationConfig:
    n_utterances: int = 600
    n_speakers: int = 10
    emotion_weights: tuple[float, ...] = (1708, 1636, 1103, 1084)
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    transcript_len: tuple[int, int] = (2, 6)
    sample_rate: int = 4000
    duration: tuple[float, float] = (0.5, 1.5)
    male_f0: tuple[float, float] = (120.0, 180.0)
    female_f0: tuple[float, float] = (300.0, 400.0)
    snr_db: float = 25.0
    headroom: float = 0.95

    def validate(self) -> None:
        if self.n_speakers < 2 or self.n_speakers % 2:
            raise ValueError(f"n_speakers must be even and >= 2, got {self.n_speakers}")
        if len(self.vocab) < 4:
            raise ValueError(f"vocabulary needs at least 4 tokens, got {len(self.vocab)}")
        if len(set(self.vocab)) != len(self.vocab) or any(not t or " " in t for t in self.vocab):
            raise ValueError("vocabulary tokens must be unique, non-empty and space-free")
        pairs = len(_TOKEN_FREQS) * (len(_TOKEN_FREQS) - 1) // 2
        if len(self.vocab) > pairs:
            raise ValueError(f"at most {pairs} tokens can be given distinct tone pairs")
        lo, hi = self.transcript_len
        if lo < 1 or hi < lo:
            raise ValueError(f"transcript lengths must satisfy 1 <= min <= max, got {self.transcript_len}")
        if len(self.emotion_weights) != len(EMOTIONS) or min(self.emotion_weights) <= 0:
            raise ValueError("emotion_weights needs one positive weight per emotion")
        counts = self.emotion_counts()
        if min(counts) < 1:
            raise ValueError(f"every emotion needs at least one utterance, got counts {counts}")
        if self.n_utterances < self.n_speakers:
            raise ValueError("need at least one utterance per speaker")
        dmin, dmax = self.duration
        if not 0 < dmin <= dmax:
            raise ValueError(f"invalid duration range {self.duration}")
        longest = max(b for _, b in _BURST_SECONDS.values())
        if int(dmin * self.sample_rate) < hi * (int(round(longest * self.sample_rate)) + 1):
            raise ValueError("shortest utterance too short for the longest transcript")
        if not 0 < self.headroom <= 1:
            raise ValueError("headroom must lie in (0, 1]")

    def emotion_counts(self) -> list[int]:
        """Largest-remainder split of n_utterances by emotion_weights."""
        w = np.asarray(self.emotion_weights, dtype=float)
        exact = self.n_utterances * w / w.sum()
        counts = np.floor(exact).astype(int)
        short = self.n_utterances - counts.sum()
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
        return counts.tolist()

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        kwargs = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown generation config field {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def speaker_gender(speaker_id: int) -> str:
    """Even ids are male, odd ids female."""
    return GENDERS[speaker_id % 2]


@dataclass
class Utterance:
    utterance_id: str
    audio: np.ndarray
    sample_rate: int
    speaker_id: int
    gender: str
    style: str
    transcript: tuple[str, ...]
    emotion: str

    def labels(self) -> dict:
        return {"speaker": self.speaker_id, "gender": self.gender, "style": self.style,
                "emotion": self.emotion, "transcript": " ".join(self.transcript)}


@dataclass
class ManifestRecord:
    id: str
    path: str
    num_samples: int
    sample_rate: int
    speaker: int
    gender: str
    style: str
    emotion: str
    transcript: str

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_FIELDS})


@dataclass
class CorpusManifest:
    records: list[ManifestRecord]
    config: GenerationConfig
    seed: int

    @property
    def speakers(self) -> list[int]:
        return sorted({r.speaker for r in self.records})


@dataclass
class Corpus:
    manifest: CorpusManifest
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def vocab(self) -> tuple[str, ...]:
        return tuple(self.manifest.config.vocab)

    def subset(self, ids: Iterable[str]) -> list[Utterance]:
        wanted = set(ids)
        return [u for u in self.utterances if u.utterance_id in wanted]


# ---------------------------------------------------------------- generation

def _speaker_f0(cfg: GenerationConfig, speaker: int, seed: int) -> float:
    lo, hi = cfg.male_f0 if speaker % 2 == 0 else cfg.female_f0
    n_per_gender = cfg.n_speakers // 2
    # evenly spaced inside the band with a small seeded offset
    rank = speaker // 2
    base = lo + (hi - lo) * (rank + 0.5) / n_per_gender
    jitter = np.random.default_rng([seed, 1_000_003, speaker]).uniform(-0.2, 0.2)
    return float(base + jitter * (hi - lo) / n_per_gender)


def _token_pairs(vocab: Sequence[str]) -> dict[str, tuple[float, float]]:
    pairs = [(a, b) for i, a in enumerate(_TOKEN_FREQS) for b in _TOKEN_FREQS[i + 1:]]
    # interleave so neighbouring tokens differ in both tones where possible
    order = [0, 7, 4, 9, 2, 5, 8, 1, 3, 6]
    return {tok: pairs[order[i]] for i, tok in enumerate(vocab)}


def _envelope(kind: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if kind == "flat":
        env = np.ones(n)
    elif kind == "tremolo":
        rate = rng.uniform(5.0, 7.0)
        env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    elif kind == "bursts":
        rate = rng.uniform(3.0, 4.0)
        phase = (t * rate + rng.uniform(0, 1)) % 1.0
        env = 0.25 + 0.75 * np.exp(-6.0 * phase)
    elif kind == "decay":
        env = np.exp(-1.5 * t / max(t[-1], 1e-9))
    else:
        raise ValueError(kind)
    ramp = min(n // 10, int(0.02 * sr))
    if ramp > 0:
        fade = np.linspace(0.0, 1.0, ramp)
        env[:ramp] *= fade
        env[-ramp:] *= fade[::-1]
    return env


def _segment_layout(style: str, n: int, n_tokens: int, sr: int,
                    rng: np.random.Generator) -> list[tuple[int, int]]:
    """Sample ranges of each token's tone burst.

    Scripted speech: equal-length bursts on an even grid. Improvised speech:
    longer bursts with jittered lengths at irregular positions.
    """
    lo, hi = _BURST_SECONDS[style]
    if style == "scripted":
        m = int(round(lo * sr))
        centres = (np.arange(n_tokens) + 0.5) * n / n_tokens
        return [(int(round(c - m / 2)), int(round(c - m / 2)) + m) for c in centres]
    lens = rng.integers(int(round(lo * sr)), int(round(hi * sr)) + 1, n_tokens)
    gaps = rng.dirichlet(np.full(n_tokens + 1, 1.5)) * (n - lens.sum())
    out, pos = [], 0.0
    for g, m in zip(gaps, lens):
        pos += g
        start = int(round(pos))
        out.append((start, start + int(m)))
        pos += m
    return out


def _pause_gate(style: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Voicing gate: fluent for scripted speech, jittered silent gaps for improvised."""
    gate = np.ones(n)
    if style == "scripted":
        return gate
    ramp = int(0.005 * sr)
    k = int(rng.integers(_PAUSES[0], _PAUSES[1] + 1))
    slot = n // k
    # one pause per slot so pauses never merge
    for i in range(k):
        m = int(rng.uniform(*_PAUSE_FRACTION) * n)
        start = i * slot + int(rng.integers(0, max(slot - m, 1)))
        gate[start:start + m] = 0.0
    if ramp > 1:
        gate = np.convolve(gate, np.ones(ramp) / ramp, mode="same")
    return gate


def synthesize(cfg: GenerationConfig, speaker: int, emotion: str, style: str,
               transcript: Sequence[str], n_samples: int, f0: float,
               rng: np.random.Generator) -> np.ndarray:
    sr = cfg.sample_rate
    t = np.arange(n_samples) / sr
    level, kind, vib_depth = _EMOTION_PARAMS[emotion]

    vib = vib_depth * np.sin(2 * np.pi * rng.uniform(5.0, 6.5) * t)
    phase = 2 * np.pi * np.cumsum(f0 * (1.0 + vib)) / sr
    voice = np.sin(phase + rng.uniform(0, 2 * np.pi))
    env = _envelope(kind, n_samples, sr, rng)
    gate = _pause_gate(style, n_samples, sr, rng)

    tones = np.zeros(n_samples)
    table = _token_pairs(cfg.vocab)
    for tok, (a, b) in zip(transcript, _segment_layout(style, n_samples, len(transcript), sr, rng)):
        lo, hi = table[tok]
        m = b - a
        if m <= 0:
            continue
        tt = np.arange(m) / sr
        seg = 0.5 * (np.sin(2 * np.pi * lo * tt + rng.uniform(0, 6.3))
                     + np.sin(2 * np.pi * hi * tt + rng.uniform(0, 6.3)))
        ramp = min(m // 4, int(0.01 * sr))
        if ramp > 0:
            fade = np.linspace(0.0, 1.0, ramp)
            seg[:ramp] *= fade
            seg[-ramp:] *= fade[::-1]
        tones[a:b] = seg

    # tones follow a shallower version of the envelope so late tokens stay audible
    clean = level * (_VOICE_MIX * env * gate * voice + (1 - _VOICE_MIX) * (0.5 + 0.5 * env) * tones)
    power = max(np.mean(clean ** 2), 1e-12)
    noise = rng.normal(0.0, np.sqrt(power / 10 ** (cfg.snr_db / 10)), n_samples)
    x = clean + noise
    peak = np.abs(x).max()
    if peak > cfg.headroom:
        x = x * (cfg.headroom / peak)
    return x


def generate_corpus(config: GenerationConfig | None = None, seed: int = 7,
                    out_dir: str | Path | None = None) -> Corpus:
    """Build the corpus as a pure function of ``(config, seed)``.

    When ``out_dir`` is given the corpus is also written there (WAV files,
    ``manifest.jsonl`` and ``generation.json``).
    """
    cfg = config or GenerationConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.n_utterances
    emotions = np.repeat(np.arange(len(EMOTIONS)), cfg.emotion_counts())
    rng.shuffle(emotions)
    speakers = np.arange(n) % cfg.n_speakers
    rng.shuffle(speakers)
    styles = np.arange(n) % 2
    rng.shuffle(styles)
    f0s = [_speaker_f0(cfg, s, seed) for s in range(cfg.n_speakers)]

    utts, records = [], []
    for i in range(n):
        urng = np.random.default_rng([seed, i])
        spk = int(speakers[i])
        emo = EMOTIONS[emotions[i]]
        sty = STYLES[styles[i]]
        n_tok = int(urng.integers(cfg.transcript_len[0], cfg.transcript_len[1] + 1))
        transcript = tuple(cfg.vocab[j] for j in urng.integers(0, len(cfg.vocab), n_tok))
        n_samples = int(round(urng.uniform(*cfg.duration) * cfg.sample_rate))
        audio = synthesize(cfg, spk, emo, sty, transcript, n_samples, f0s[spk], urng)
        uid = f"utt{i:05d}"
        u = Utterance(uid, audio, cfg.sample_rate, spk, speaker_gender(spk), sty, transcript, emo)
        utts.append(u)
        records.append(ManifestRecord(uid, f"audio/{uid}.wav", n_samples, cfg.sample_rate, spk,
                                      u.gender, sty, emo, " ".join(transcript)))
    corpus = Corpus(CorpusManifest(records, cfg, seed), utts)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def spectral_gender_guess(audio: np.ndarray, sample_rate: int,
                          male_band: tuple[float, float], female_band: tuple[float, float]) -> str:
    """Compare spectral energy in the two pitch bands; no learning involved."""
    power = np.abs(np.fft.rfft(audio * np.hanning(len(audio)))) ** 2
    freqs = np.fft.rfftfreq(len(audio), 1.0 / sample_rate)

    def band(lo, hi):
        return power[(freqs >= lo) & (freqs <= hi)].sum()

    male = band(male_band[0] * 0.9, male_band[1] * 1.1)
    female = band(female_band[0] * 0.9, female_band[1] * 1.1)
    return "male" if male > female else "female"


# ---------------------------------------------------------------- augmentation

def tdsa_speed_perturb(audio: np.ndarray, rate: int) -> np.ndarray:
    """Speed perturbation by linear resampling.

    Output length is round(len * 100 / rate) (half rounds up); rate 100 is
    the identity.
    """
    if rate not in TDSA_RATES:
        raise ValueError(f"unsupported TDSA rate {rate}; expected one of {TDSA_RATES}")
    audio = np.asarray(audio)
    n = len(audio)
    if n == 0:
        raise ValueError("cannot perturb empty audio")
    if rate == 100:
        return audio.copy()
    n_out = int(np.floor(n * 100 / rate + 0.5))
    if n_out == 1 or n == 1:
        return np.full(n_out, audio[0], dtype=audio.dtype)
    pos = np.arange(n_out) * ((n - 1) / (n_out - 1))
    return np.interp(pos, np.arange(n), audio).astype(audio.dtype)


def tdsa_rates(rng: np.random.Generator, rates: Sequence[int] = TDSA_RATES,
               policy: str = "sample") -> list[int]:
    """Rates to apply to one utterance: one uniform draw, or all of them for ``expand``."""
    if policy == "sample":
        return [int(rates[rng.integers(len(rates))])]
    if policy == "expand":
        return [int(r) for r in rates]
    raise ValueError(f"unknown TDSA policy {policy!r}")


def tdsa_augment(audio: np.ndarray, rng: np.random.Generator,
                 rates: Sequence[int] = TDSA_RATES, policy: str = "sample") -> list[np.ndarray]:
    """Train-time TDSA views of one utterance."""
    return [tdsa_speed_perturb(audio, r) for r in tdsa_rates(rng, rates, policy)]


# ---------------------------------------------------------------- folds

@dataclass
class FoldPlan:
    k: int
    assignments: dict[int, frozenset[int]]

    def test_speakers(self, fold: int) -> frozenset[int]:
        return self.assignments[fold]

    def split(self, manifest: CorpusManifest, fold: int) -> tuple[list[str], list[str]]:
        """Utterance ids of the (train, test) split for ``fold``."""
        held = self.assignments[fold]
        train = [r.id for r in manifest.records if r.speaker not in held]
        test = [r.id for r in manifest.records if r.speaker in held]
        return train, test


def make_speaker_independent_folds(manifest: CorpusManifest, k: int) -> FoldPlan:
    """Hold out n_speakers / k speakers per fold, balancing genders.

    Assignment depends only on the set of speaker ids, never on record
    order. With an even number of speakers per fold every fold holds out
    equally many male and female speakers (one pair when k = n_speakers/2).
    """
    speakers = manifest.speakers
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(speakers) % k:
        raise ValueError(f"{len(speakers)} speakers cannot be split evenly into {k} folds")
    per = len(speakers) // k
    males = [s for s in speakers if speaker_gender(s) == "male"]
    females = [s for s in speakers if speaker_gender(s) == "female"]
    assignments: dict[int, frozenset[int]] = {}
    if per % 2 == 0 and len(males) == len(females):
        h = per // 2
        for f in range(k):
            assignments[f] = frozenset(males[f * h:(f + 1) * h] + females[f * h:(f + 1) * h])
    else:
        for f in range(k):
            assignments[f] = frozenset(speakers[f * per:(f + 1) * per])
    return FoldPlan(k, assignments)


# ---------------------------------------------------------------- file I/O

_PCM_SCALE = 32767.0


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * _PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Parse a PCM16 mono WAV, reporting the byte offset of any defect."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorpusError(f"{path}: not a RIFF/WAVE file (offset 0)")
    pos, fmt, data = 12, None, None
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise CorpusError(f"{path}: truncated chunk header at byte offset {pos}")
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + size > len(raw):
            raise CorpusError(f"{path}: chunk {cid!r} at byte offset {pos} declares {size} bytes "
                              f"but file ends at {len(raw)}")
        if cid == b"fmt ":
            if size < 16:
                raise CorpusError(f"{path}: fmt chunk too short at byte offset {pos}")
            fmt = struct.unpack("<HHIIHH", raw[body:body + 16]) + (pos,)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None or data is None:
        raise CorpusError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, channels, rate, _, _, bits, fpos = fmt
    if tag != 1 or channels != 1 or bits != 16:
        raise CorpusError(f"{path}: expected PCM16 mono (format chunk at byte offset {fpos})")
    body, size = data
    if size % 2:
        raise CorpusError(f"{path}: odd data size {size} at byte offset {body}")
    pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
    return pcm.astype(np.float64) / _PCM_SCALE, rate


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    by_id = {u.utterance_id: u for u in corpus.utterances}
    lines = []
    for rec in corpus.manifest.records:
        u = by_id[rec.id]
        write_wav(root / rec.path, u.audio, rec.sample_rate)
        lines.append(rec.to_json())
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"seed": corpus.manifest.seed, "config": corpus.manifest.config.to_dict()}
    (root / "generation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(root: str | Path) -> CorpusManifest:
    root = Path(root)
    meta_path = root / "generation.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise CorpusError(f"{meta_path}: missing generation config") from None
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{meta_path}: invalid JSON at byte offset {exc.pos}") from None
    cfg = GenerationConfig.from_dict(meta["config"])
    records, seen = [], set()
    man_path = root / "manifest.jsonl"
    if not man_path.exists():
        raise CorpusError(f"{man_path}: missing manifest")
    offset = 0
    for lineno, line in enumerate(man_path.read_bytes().split(b"\n"), start=1):
        start, offset = offset, offset + len(line) + 1
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{man_path}: line {lineno} is not JSON "
                              f"(byte offset {start + exc.pos})") from None
        if set(obj) != set(MANIFEST_FIELDS):
            raise CorpusError(f"{man_path}: line {lineno} (byte offset {start}) has fields "
                              f"{sorted(obj)}, expected {sorted(MANIFEST_FIELDS)}")
        rec = ManifestRecord(**obj)
        if rec.id in seen:
            raise CorpusError(f"{man_path}: duplicate id {rec.id!r} on line {lineno}")
        seen.add(rec.id)
        records.append(rec)
    return CorpusManifest(records, cfg, int(meta["seed"]))


def read_corpus(root: str | Path) -> Corpus:
    """Load and eagerly validate every audio file named by the manifest."""
    root = Path(root)
    manifest = read_manifest(root)
    utts = []
    for rec in manifest.records:
        path = root / rec.path
        if not path.exists():
            raise CorpusError(f"{path}: referenced by manifest entry {rec.id!r} but missing")
        audio, sr = read_wav(path)
        if len(audio) != rec.num_samples:
            raise CorpusError(f"{path}: {len(audio)} samples but manifest says {rec.num_samples} "
                              f"(data ends at byte offset {44 + 2 * len(audio)})")
        if sr != rec.sample_rate:
            raise CorpusError(f"{path}: sample rate {sr} but manifest says {rec.sample_rate}")
        utts.append(Utterance(rec.id, audio, sr, rec.speaker, rec.gender, rec.style,
                              tuple(rec.transcript.split(" ")), rec.emotion))
    return Corpus(manifest, utts)
