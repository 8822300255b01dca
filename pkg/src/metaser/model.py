"""Full multi-task model: encoder, fusion, auxiliary heads, co-attention and SER head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import Batch, Encoder, EncoderConfig, apply_freeze
from .fusion import CoAttention, make_fusion
from .nn import Module, masked_mean_pool
from .tasks import AUX_TASKS, AsrHead, ClassifierHead, SerHead

_NEG = -1e9


@dataclass
class ModelOutputs:
    fused: Tensor
    aux: dict[str, Tensor] = field(default_factory=dict)
    hidden: dict[str, Tensor] = field(default_factory=dict)
    ser_logits: Tensor | None = None


class MultiTaskModel(Module):
    def __init__(self, encoder_cfg: EncoderConfig, fusion: str, aux_tasks, coattention: bool,
                 n_speakers: int, vocab_size: int, rng: np.random.Generator,
                 aux_dim: int = 32, ser_hidden: int = 64, ser_dropout: float = 0.1,
                 dtype=np.float64) -> None:
        unknown = set(aux_tasks) - set(AUX_TASKS)
        if unknown:
            raise ValueError(f"unknown auxiliary tasks {sorted(unknown)}")
        self.aux_tasks = [t for t in AUX_TASKS if t in aux_tasks]
        self.use_coattention = bool(coattention) and bool(self.aux_tasks)
        self.dtype = dtype
        self.encoder = Encoder(encoder_cfg, rng, dtype)
        self.fusion = make_fusion(fusion, encoder_cfg.n_layers, dtype)
        d_fused = self.fusion.out_dim(encoder_cfg.model_dim)
        n_classes = {"gender": 2, "speaker": n_speakers, "style": 2}
        self.heads: dict[str, Module] = {}
        for task in self.aux_tasks:
            if task == "asr":
                self.heads[task] = AsrHead(d_fused, aux_dim, vocab_size, rng, dtype)
            else:
                self.heads[task] = ClassifierHead(task, d_fused, aux_dim, n_classes[task], rng, dtype)
        self.coattn = CoAttention(d_fused, aux_dim, rng, dtype) if self.use_coattention else None
        ser_in = d_fused + aux_dim * len(self.aux_tasks)
        self.ser_head = SerHead(ser_in, ser_hidden, 4, ser_dropout, rng, dtype)
        self.speaker_bias = np.zeros(n_speakers, dtype=dtype)
        # parameter values at the end of stage 1, kept when auxiliary metrics are scored there
        self.stage1_state: dict[str, np.ndarray] | None = None

    def restrict_speakers(self, known) -> None:
        """Only ``known`` speakers can be scored by the speaker head."""
        self.speaker_bias = np.full(len(self.speaker_bias), _NEG, dtype=self.dtype)
        self.speaker_bias[list(known)] = 0.0

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def configure_stage(self, stage: int, freeze_aux_heads: bool = True) -> None:
        """Set every trainable flag for a training stage."""
        apply_freeze(self.encoder.parameters(), stage, self.encoder.cfg)
        self.fusion.set_trainable(True)
        for head in self.heads.values():
            head.set_trainable(stage == 1 or not freeze_aux_heads)
        ser_side = stage == 2
        self.ser_head.set_trainable(ser_side)
        if self.coattn is not None:
            self.coattn.set_trainable(ser_side)

    def forward(self, batch: Batch, with_ser: bool = True, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutputs:
        stack = self.encoder(batch, training)
        fused = self.fusion(stack)
        out = ModelOutputs(fused)
        mask = batch.frame_mask
        for task, head in self.heads.items():
            pred, hidden = head(fused, mask)
            if task == "speaker":
                pred = pred + Tensor(self.speaker_bias)
            out.aux[task] = pred
            out.hidden[task] = hidden
        if with_ser:
            ser_vec = masked_mean_pool(fused, mask)
            hiddens = [out.hidden[t] for t in self.aux_tasks]
            if self.coattn is not None:
                feat = self.coattn(ser_vec, hiddens)
            elif hiddens:
                feat = ad.concat([ser_vec] + hiddens, axis=-1)
            else:
                feat = ser_vec
            out.ser_logits = self.ser_head(feat, training, rng)
        return out
