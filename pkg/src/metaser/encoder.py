"""Toy SSL-style encoder: strided conv frontend plus a tapped pre-norm transformer stack."""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import LayerNorm, Linear, Module, uniform_init

_NEG = -1e9
_FB_OFFSET = 4.0   # keeps GELU in its near-linear range for |x| <= 1


@dataclass
class EncoderConfig:
    n_layers: int = 12
    model_dim: int = 32
    n_heads: int = 2
    ff_dim: int = 64
    conv_kernels: tuple[int, ...] = (8, 8)
    conv_strides: tuple[int, ...] = (4, 4)
    freeze_first_k_stage2: int = 4
    frontend_init: str = "filterbank"
    input_gain: float = 4.0
    pos_scale: float = 0.3
    residual_init: float | None = None   # scale on residual output projections; None -> 1/sqrt(2L)

    def validate(self) -> None:
        if self.n_layers < 2:
            raise ValueError(f"need at least 2 transformer layers, got {self.n_layers}")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.freeze_first_k_stage2 < self.n_layers:
            raise ValueError("freeze_first_k_stage2 must lie in [0, n_layers)")
        if len(self.conv_kernels) != len(self.conv_strides) or not self.conv_kernels:
            raise ValueError("conv_kernels and conv_strides must be non-empty and equal length")
        if any(k < s for k, s in zip(self.conv_kernels, self.conv_strides)):
            raise ValueError("each conv kernel must be at least its stride")
        if self.residual_init is not None and not self.residual_init > 0:
            raise ValueError(f"residual_init must be positive, got {self.residual_init}")
        if self.frontend_init not in ("filterbank", "random"):
            raise ValueError(f"unknown frontend_init {self.frontend_init!r}")
        if self.frontend_init == "filterbank":
            if len(self.conv_kernels) != 2:
                raise ValueError("filterbank frontend needs exactly two conv layers")
            if self.model_dim < self.conv_kernels[0] or self.model_dim % 4:
                raise ValueError("filterbank frontend needs model_dim >= first kernel and divisible by 4")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.conv_kernels, self.conv_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def conv_pads(self) -> list[tuple[int, int]]:
        # pad k - s split evenly: each layer maps n samples to n // s frames
        return [((k - s) // 2, (k - s) - (k - s) // 2)
                for k, s in zip(self.conv_kernels, self.conv_strides)]

    def frames(self, n_samples: int) -> int:
        n = n_samples
        for (pl, pr), k, s in zip(self.conv_pads(), self.conv_kernels, self.conv_strides):
            n = (n + pl + pr - k) // s + 1
        return n

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d - d // 2])
    return pe


@dataclass
class Batch:
    """Right-padded audio with per-utterance frame validity."""

    audio: np.ndarray | None
    lengths: np.ndarray
    frame_mask: np.ndarray
    features: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.lengths)


def batch_collate(audios: Sequence[np.ndarray], config: EncoderConfig, dtype=np.float64) -> Batch:
    if not len(audios):
        raise ValueError("cannot collate an empty batch")
    lengths = np.array([len(a) for a in audios])
    n_max = int(lengths.max())
    audio = np.zeros((len(audios), n_max), dtype=dtype)
    for i, a in enumerate(audios):
        audio[i, : len(a)] = a
    frames = np.array([config.frames(int(n)) for n in lengths])
    t_max = config.frames(n_max)
    mask = (np.arange(t_max)[None, :] < frames[:, None]).astype(dtype)
    return Batch(audio, lengths, mask)


def collate_features(features: Sequence[np.ndarray], lengths: Sequence[int], dtype=np.float64) -> Batch:
    """Batch precomputed frontend outputs, each (T_i, d), by right-padding with zeros."""
    if not len(features):
        raise ValueError("cannot collate an empty batch")
    t_max = max(f.shape[0] for f in features)
    d = features[0].shape[1]
    feats = np.zeros((len(features), t_max, d), dtype=dtype)
    mask = np.zeros((len(features), t_max), dtype=dtype)
    for i, f in enumerate(features):
        feats[i, : len(f)] = f
        mask[i, : len(f)] = 1.0
    return Batch(None, np.asarray(lengths), mask, feats)


class Frontend(Module):
    """Strided conv layers with GELU, kept frozen by both training stages."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype) -> None:
        self.cfg = cfg
        d = cfg.model_dim
        self.convs = []
        c_in = 1
        for j, (k, _s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides), start=1):
            w = uniform_init(rng, (k, c_in, d), k * c_in, dtype)
            b = np.zeros(d, dtype=dtype)
            self.convs.append((Parameter(w, f"encoder.frontend.conv{j}.w"),
                               Parameter(b, f"encoder.frontend.conv{j}.b")))
            c_in = d
        if cfg.frontend_init == "filterbank":
            self._init_filterbank(dtype)

    def _init_filterbank(self, dtype) -> None:
        """Deterministic stand-in for pretrained features: band energies.

        The first conv passes the waveform through in polyphase form (channel
        c at frame p holds sample 4p + c), biased so that GELU stays nearly
        linear. The second conv then sees a contiguous window of samples and
        applies Hann-windowed quadrature sinusoids at evenly spaced centre
        frequencies; GELU on the +/- cos/sin outputs rectifies them, so the
        frame features approximate per-band magnitudes. Needs exactly two
        conv layers with equal kernels and strides, a kernel at least the
        stride, and model_dim >= kernel.
        """
        cfg = self.cfg
        (w1, b1), (w2, b2) = self.convs
        k1, k2 = cfg.conv_kernels
        s1, _ = cfg.conv_strides
        d = cfg.model_dim
        w = np.zeros(w1.shape)
        for c in range(k1):
            w[c, 0, c] = 1.0
        w1.data = w.astype(dtype)
        b1.data = np.where(np.arange(d) < k1, _FB_OFFSET, 0.0).astype(dtype)

        taps = k2 * s1                      # contiguous samples reachable through the polyphase channels
        win = np.hanning(taps + 2)[1:-1]
        t = np.arange(taps)
        n_bands = d // 4
        freqs = (np.arange(n_bands) + 0.5) / (2 * n_bands)   # cycles per sample, evenly over [0, 1/2]
        w = np.zeros(w2.shape)
        bias = np.zeros(d)
        for i, f in enumerate(freqs):
            for q, phase in enumerate((0.0, np.pi, np.pi / 2, 3 * np.pi / 2)):
                h = win * np.cos(2 * np.pi * f * t + phase) / (win.sum() / 2) * cfg.input_gain
                o = 4 * i + q
                for j in range(k2):
                    w[j, :s1, o] = h[j * s1:(j + 1) * s1]
                bias[o] = -_FB_OFFSET * h.sum()
        w2.data = w.astype(dtype)
        b2.data = bias.astype(dtype)

    def __call__(self, audio: Tensor, lengths: np.ndarray) -> Tensor:
        cfg = self.cfg
        x = ad.reshape(audio, (audio.shape[0], audio.shape[1], 1)) * cfg.input_gain
        n = np.asarray(lengths)
        for (w, b), pad, s in zip(self.convs, cfg.conv_pads(), cfg.conv_strides):
            x = ad.gelu(ad.conv1d(x, w, b, s, pad))
            n = np.array([(m + pad[0] + pad[1] - w.shape[0]) // s + 1 for m in n])
            # zero padded frames so batched and single-utterance results agree
            valid = (np.arange(x.shape[1])[None, :] < n[:, None]).astype(x.dtype)
            x = x * Tensor(valid[:, :, None])
        return x


class TransformerLayer(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, index: int, cfg: EncoderConfig, rng: np.random.Generator, dtype) -> None:
        d, name = cfg.model_dim, f"encoder.layers.{index}"
        self.index = index
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(f"{name}.ln1", d, dtype)
        self.qkv = Linear(f"{name}.attn.qkv", d, 3 * d, rng, dtype)
        self.out = Linear(f"{name}.attn.out", d, d, rng, dtype)
        self.ln2 = LayerNorm(f"{name}.ln2", d, dtype)
        self.ff1 = Linear(f"{name}.ff1", d, cfg.ff_dim, rng, dtype)
        self.ff2 = Linear(f"{name}.ff2", cfg.ff_dim, d, rng, dtype)
        # start each block close to the identity so random layers do not bury the input
        scale = cfg.residual_init if cfg.residual_init is not None else 1.0 / np.sqrt(2 * cfg.n_layers)
        self.out.w.data *= dtype(scale)
        self.ff2.w.data *= dtype(scale)

    def __call__(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h, dh = self.n_heads, d // self.n_heads
        qkv = self.qkv(self.ln1(x))
        qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        ctx = ad.attention(q, k, v, key_bias)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        x = x + self.out(ctx)
        return x + self.ff2(ad.gelu(self.ff1(self.ln2(x))))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> None:
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.frontend = Frontend(cfg, rng, dtype)
        self.layers = [TransformerLayer(i, cfg, rng, dtype) for i in range(1, cfg.n_layers + 1)]

    def forward_batch(self, batch: Batch, training: bool = False) -> list[Tensor]:
        """Return the LayerStack [F_1, ..., F_L], each (B, T, d).

        ``training`` is accepted for interface symmetry; the encoder itself
        has no stochastic layers.
        """
        del training
        if batch.features is not None:
            x = Tensor(batch.features.astype(self.dtype, copy=False))
        else:
            self._check_length(int(batch.lengths.min()))
            x = self.frontend(Tensor(batch.audio.astype(self.dtype)), batch.lengths)
        if x.shape[1] != batch.frame_mask.shape[1]:
            raise ad.ShapeError(f"frontend produced {x.shape[1]} frames, mask has {batch.frame_mask.shape[1]}")
        pe = sinusoidal_positions(x.shape[1], self.cfg.model_dim).astype(self.dtype)
        x = x + Tensor(pe * self.cfg.pos_scale)
        key_bias = ((1.0 - batch.frame_mask) * _NEG)[:, None, None, :].astype(self.dtype)
        stack = []
        for layer in self.layers:
            x = layer(x, key_bias)
            stack.append(x)
        return stack

    def __call__(self, batch: Batch, training: bool = False) -> list[Tensor]:
        return self.forward_batch(batch, training)

    def _check_length(self, n: int) -> None:
        rf = self.cfg.receptive_field
        if n < rf:
            raise ValueError(f"audio of {n} samples is shorter than the frontend receptive "
                             f"field ({rf}); pad it to at least {rf} samples")

    def frontend_features(self, audio: np.ndarray) -> np.ndarray:
        """Frontend output (T, d) for one utterance, computed without a tape.

        Valid for caching only while the frontend is frozen.
        """
        audio = np.asarray(audio)
        self._check_length(len(audio))
        x = self.frontend(Tensor(audio[None].astype(self.dtype)), np.array([len(audio)]))
        return x.data[0]


def encoder_forward(encoder: Encoder, audio: np.ndarray, mode: str = "eval") -> list[np.ndarray]:
    """Single-utterance convenience: LayerStack as a list of (T, d) arrays."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = batch_collate([np.asarray(audio)], encoder.cfg, encoder.dtype)
    return [f.data[0] for f in encoder.forward_batch(batch, training=mode == "train")]


# ---------------------------------------------------------------- freezing

_LAYER_RE = re.compile(r"^encoder\.layers\.(\d+)\.")
HEAD_NAMESPACES = ("fusion.", "heads.", "coattn.")


@dataclass
class FreezeMask:
    stage: int
    trainable: dict[str, bool]

    @property
    def trainable_layers(self) -> list[int]:
        out = set()
        for name, flag in self.trainable.items():
            m = _LAYER_RE.match(name)
            if m and flag:
                out.add(int(m.group(1)))
        return sorted(out)


def apply_freeze(params: Iterable[Parameter], stage: int, config: EncoderConfig) -> FreezeMask:
    """Set encoder trainable flags for a training stage.

    Stage 1 freezes the conv frontend and trains every transformer layer;
    stage 2 additionally freezes layers 1..freeze_first_k_stage2. Parameters
    in the head namespaces are left as they are.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    k = config.freeze_first_k_stage2 if stage == 2 else 0
    flags: dict[str, bool] = {}
    for p in params:
        if p.name.startswith("encoder.frontend."):
            p.trainable = False
        elif (m := _LAYER_RE.match(p.name)) is not None:
            p.trainable = int(m.group(1)) > k
        elif p.name.startswith(HEAD_NAMESPACES):
            continue
        else:
            raise ValueError(f"cannot place parameter {p.name!r}: no layer index and not in a "
                             f"frontend or head namespace")
        flags[p.name] = p.trainable
    return FreezeMask(stage, flags)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"MSERCKPT"


def save_checkpoint(path: str | Path, params: Iterable[Parameter]) -> None:
    """Flat float32 blob preceded by a JSON index of names, shapes and offsets."""
    index, blobs, offset = {}, [], 0
    for p in sorted(params, key=lambda p: p.name):
        data = np.ascontiguousarray(p.data, dtype="<f4")
        index[p.name] = {"shape": list(p.shape), "offset": offset, "trainable": p.trainable}
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    index = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for name, meta in index.items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = base + meta["offset"]
        if start + 4 * count > len(raw):
            raise ValueError(f"{path}: tensor {name!r} runs past end of file (byte offset {start})")
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(meta["shape"]).copy()
    return out


def load_into(params: Iterable[Parameter], arrays: dict[str, np.ndarray]) -> None:
    params = list(params)
    missing = [p.name for p in params if p.name not in arrays]
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    for p in params:
        if arrays[p.name].shape != p.shape:
            raise ValueError(f"shape mismatch for {p.name}: {arrays[p.name].shape} vs {p.shape}")
        p.data = arrays[p.name].astype(p.dtype)
