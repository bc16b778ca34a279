"""LSTR- and CMeRT-style unified detection/anticipation models.

Both models consume a window ending at the current frame T:

* long memory: ``long_len // long_sample_rate`` frames sampled every
  ``long_sample_rate`` frames, newest one at ``T - short_len``;
* short memory: the ``short_len`` frames ending at T;
* near past (CMeRT only): the ``near_past_len`` frames before the short memory.

Positions before frame 0 are filled with frame 0 and flagged invalid.
Output rows are the short-memory frames (oldest first, T last) followed by
one row per anticipation offset ``1..anticipation_len``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import torch
from torch import nn

from .nn import DTYPE, DecoderLayer, DecoderLayerSpec, ShapeError, causal_mask, init_uniform_fan_in


class Variant(str, Enum):
    LSTR = "LSTR"
    CMERT = "CMERT"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.CMERT
    d_model: int = 32
    heads: int = 4
    ff_dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 1
    n_latent: int = 8
    long_len: int = 64
    long_sample_rate: int = 4
    short_len: int = 8
    near_past_len: Optional[int] = None
    anticipation_len: int = 6
    near_future_len: int = 8
    dropout: float = 0.1
    d_slow: int = 24
    d_fast: int = 8

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.near_past_len is None:
            object.__setattr__(self, "near_past_len",
                               self.short_len // 2 if self.variant is Variant.CMERT else 0)
        if self.variant is Variant.LSTR and self.near_past_len:
            raise ValueError("near_past_len applies to CMERT only")
        if self.d_model % self.heads:
            raise ShapeError("d_model must be divisible by heads")
        if self.anticipation_len < 0:
            raise ValueError("anticipation_len must be >= 0")
        if self.long_len < self.long_sample_rate or self.short_len < 1:
            raise ValueError("memory lengths too small")
        if self.variant is Variant.CMERT and self.near_future_len < self.anticipation_len:
            raise ValueError("near_future_len must be >= anticipation_len for CMERT")

    @property
    def long_tokens(self) -> int:
        return self.long_len // self.long_sample_rate

    @property
    def d_total(self) -> int:
        return self.d_slow + self.d_fast

    @property
    def out_rows(self) -> int:
        return self.short_len + self.anticipation_len

    @property
    def history_len(self) -> int:
        return self.long_len + self.short_len + self.near_past_len

    def layer_spec(self) -> DecoderLayerSpec:
        return DecoderLayerSpec(self.d_model, self.heads, self.ff_dim, self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class WindowInput:
    """Batched window tensors; ``*_valid`` are boolean masks (True = real frame)."""
    long_mem: torch.Tensor
    long_valid: torch.Tensor
    short_mem: torch.Tensor
    short_valid: torch.Tensor
    near_past: torch.Tensor
    near_valid: torch.Tensor

    @property
    def batch(self) -> int:
        return self.short_mem.shape[0]


@dataclass
class ModelOutput:
    frame_logits: torch.Tensor
    refined_logits: Optional[torch.Tensor] = None
    near_future_logits: Optional[torch.Tensor] = None

    @property
    def final_logits(self) -> torch.Tensor:
        return self.refined_logits if self.refined_logits is not None else self.frame_logits


# -- window assembly --------------------------------------------------------

def window_indices(t_current, cfg: ModelConfig):
    """Frame indices (possibly negative) for each memory of windows ending at ``t_current``."""
    t = np.asarray(t_current, dtype=np.int64).reshape(-1, 1)
    m, npast, r = cfg.short_len, cfg.near_past_len, cfg.long_sample_rate
    short = t - m + 1 + np.arange(m)
    newest_hist = t - m
    long_ = newest_hist - r * np.arange(cfg.long_tokens - 1, -1, -1)
    near = newest_hist - npast + 1 + np.arange(npast)
    return long_, short, near


def gather_windows(frames: np.ndarray, t_current, cfg: ModelConfig, base=None) -> WindowInput:
    """Assemble windows from a frame matrix; only frames <= T are ever read.

    ``base`` (one per window) offsets indices into a matrix holding several
    videos back to back; ``t_current`` is then relative to each video's start.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1] != cfg.d_total:
        raise ShapeError(f"feature dim {frames.shape[1]} != {cfg.d_total}")
    t = np.asarray(t_current, dtype=np.int64).reshape(-1)
    if base is None:
        if t.size and (t.min() < 0 or t.max() >= len(frames)):
            raise IndexError("current frame outside stream")
        base = np.zeros_like(t)
    base = np.asarray(base, dtype=np.int64).reshape(-1, 1)
    parts = []
    for idx in window_indices(t, cfg):
        valid = idx >= 0
        parts.append(torch.from_numpy(frames[base + np.where(valid, idx, 0)]))
        parts.append(torch.from_numpy(valid))
    return WindowInput(*parts)


# -- models --------------------------------------------------------------

class LongMemoryCompressor(nn.Module):
    """Learnable latent queries attending to (fused) long-memory tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.zeros(cfg.n_latent, cfg.d_model, dtype=DTYPE))
        self.layers = nn.ModuleList(DecoderLayer(cfg.layer_spec()) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, tokens, valid, train=False, generator=None):
        b, n = tokens.shape[0], self.queries.shape[0]
        x = self.queries.expand(b, -1, -1)
        gate = valid.any(dim=-1)
        # cold start: with no valid history, cross-attention is switched off
        keys = valid | ~gate[:, None]
        cross = keys[:, None, :].expand(b, n, keys.shape[-1])
        self_mask = torch.ones(n, n, dtype=torch.bool)
        for layer in self.layers:
            x = layer(x, tokens, self_mask, cross, train, generator, memory_gate=gate)
        return self.norm(x)


class StruggleModel(nn.Module):
    """Parts shared by both variants: fusion head, positions, compressor, classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.fusion = nn.Linear(cfg.d_total, d, dtype=DTYPE)
        self.pos_long = nn.Parameter(torch.zeros(cfg.long_tokens, d, dtype=DTYPE))
        self.pos_short = nn.Parameter(torch.zeros(cfg.near_past_len + cfg.short_len, d,
                                                  dtype=DTYPE))
        self.compressor = LongMemoryCompressor(cfg)
        if cfg.anticipation_len > 0:
            self.ant_token = nn.Parameter(torch.zeros(d, dtype=DTYPE))
            self.ant_offsets = nn.Parameter(torch.zeros(cfg.anticipation_len, d, dtype=DTYPE))
        self.classifier = nn.Linear(d, 2, dtype=DTYPE)
        self._build()
        init_uniform_fan_in(self, torch.Generator().manual_seed(seed))

    def _build(self):
        raise NotImplementedError

    def fuse(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated [slow | fast] features -> d_model via an affine map."""
        if x.shape[-1] != self.cfg.d_total:
            raise ShapeError(f"expected {self.cfg.d_slow}+{self.cfg.d_fast} feature columns, "
                             f"got {x.shape[-1]}")
        return self.fusion(x)

    def anticipation_tokens(self, batch: int) -> torch.Tensor:
        d = self.cfg.d_model
        if self.cfg.anticipation_len == 0:
            return torch.zeros(batch, 0, d, dtype=DTYPE)
        tok = self.ant_token[None, :] + self.ant_offsets
        return tok.expand(batch, -1, -1)

    def compress(self, inp: WindowInput, train=False, generator=None) -> torch.Tensor:
        tokens = self.fuse(inp.long_mem) + self.pos_long
        return self.compressor(tokens, inp.long_valid, train, generator)

    def query_valid(self, *valids) -> torch.Tensor:
        b = valids[0].shape[0]
        ant = torch.ones(b, self.cfg.anticipation_len, dtype=torch.bool)
        return torch.cat([*valids, ant], dim=1)


class LSTRModel(StruggleModel):
    def _build(self):
        cfg = self.cfg
        if cfg.variant is not Variant.LSTR:
            raise ValueError("LSTRModel needs variant LSTR")
        self.decoder = nn.ModuleList(DecoderLayer(cfg.layer_spec())
                                     for _ in range(cfg.dec_layers))
        self.norm_out = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, inp: WindowInput, train: bool = False,
                generator: Optional[torch.Generator] = None) -> ModelOutput:
        cfg = self.cfg
        mem = self.compress(inp, train, generator)
        b = inp.batch
        x = torch.cat([self.fuse(inp.short_mem) + self.pos_short,
                       self.anticipation_tokens(b)], dim=1)
        self_mask = causal_mask(cfg.out_rows, self.query_valid(inp.short_valid))
        cross = torch.ones(cfg.out_rows, cfg.n_latent, dtype=torch.bool)
        for layer in self.decoder:
            x = layer(x, mem, self_mask, cross, train, generator)
        return ModelOutput(self.classifier(self.norm_out(x)))


class CMeRTModel(StruggleModel):
    def _build(self):
        cfg = self.cfg
        if cfg.variant is not Variant.CMERT:
            raise ValueError("CMeRTModel needs variant CMERT")
        spec = cfg.layer_spec()
        self.initial = nn.ModuleList(DecoderLayer(spec) for _ in range(cfg.dec_layers))
        self.norm_initial = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.future_queries = nn.Parameter(torch.zeros(cfg.near_future_len, cfg.d_model,
                                                       dtype=DTYPE))
        self.future = DecoderLayer(spec)
        self.norm_future = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.refine = nn.ModuleList(DecoderLayer(spec) for _ in range(cfg.dec_layers))
        self.norm_out = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, inp: WindowInput, train: bool = False,
                generator: Optional[torch.Generator] = None) -> ModelOutput:
        cfg = self.cfg
        b, m, npast, dl = inp.batch, cfg.short_len, cfg.near_past_len, cfg.anticipation_len
        n, f = cfg.n_latent, cfg.near_future_len
        mem = self.compress(inp, train, generator)

        # initial stage over [near past | short | anticipation]
        short = self.fuse(inp.short_mem) + self.pos_short[npast:]
        ant = self.anticipation_tokens(b)
        x = torch.cat([self.fuse(inp.near_past) + self.pos_short[:npast], short, ant], dim=1)
        full_valid = self.query_valid(inp.near_valid, inp.short_valid)
        self_mask = causal_mask(npast + m + dl, full_valid)
        cross = torch.ones(npast + m + dl, n, dtype=torch.bool)
        for layer in self.initial:
            x = layer(x, mem, self_mask, cross, train, generator)
        h = x[:, npast:]
        initial_logits = self.classifier(self.norm_initial(h))

        # near-future features from the compressed long memory
        fq = self.future_queries.expand(b, -1, -1)
        fut = self.norm_future(self.future(fq, mem, torch.ones(f, f, dtype=torch.bool),
                                           torch.ones(f, n, dtype=torch.bool), train, generator))
        fut_logits = self.classifier(fut) if train else None

        # refinement: initial features query [latents | near future | short | anticipation]
        kv = torch.cat([mem, fut, short, ant], dim=1)
        q_valid = self.query_valid(inp.short_valid)
        tail = causal_mask(m + dl, q_valid) & q_valid[:, None, :]
        ctx = torch.ones(b, m + dl, n + f, dtype=torch.bool)
        cross = torch.cat([ctx, tail], dim=2)
        self_mask = causal_mask(m + dl, q_valid)
        y = h
        for layer in self.refine:
            y = layer(y, kv, self_mask, cross, train, generator)
        return ModelOutput(initial_logits, self.classifier(self.norm_out(y)), fut_logits)


def build_model(cfg: ModelConfig, seed: int = 0) -> StruggleModel:
    cls = LSTRModel if cfg.variant is Variant.LSTR else CMeRTModel
    return cls(cfg, seed)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def multiply_adds_per_step(cfg: ModelConfig) -> int:
    """Multiply-add estimate for one streaming step (inference mode)."""
    d, ff = cfg.d_model, cfg.ff_dim

    def layer(q, kv):
        self_attn = 4 * q * d * d + 2 * q * q * d
        cross = 2 * q * d * d + 2 * kv * d * d + 2 * q * kv * d
        return self_attn + cross + 2 * q * d * ff

    fused = cfg.long_tokens + cfg.near_past_len + cfg.short_len
    total = fused * cfg.d_total * d
    total += cfg.enc_layers * layer(cfg.n_latent, cfg.long_tokens)
    q = cfg.near_past_len + cfg.out_rows
    total += cfg.dec_layers * layer(q, cfg.n_latent)
    if cfg.variant is Variant.CMERT:
        total += layer(cfg.near_future_len, cfg.n_latent)
        kv = cfg.n_latent + cfg.near_future_len + cfg.out_rows
        total += cfg.dec_layers * layer(cfg.out_rows, kv)
    return int(total + 2 * d * cfg.out_rows)


# -- training windows & loss ------------------------------------------------

@dataclass
class TrainingWindow:
    inputs: WindowInput
    labels: torch.Tensor
    valid: torch.Tensor
    future_labels: torch.Tensor
    future_valid: torch.Tensor


def window_ends(n: int, m: int, offset: int) -> np.ndarray:
    """Current-frame indices of non-overlapping windows of length ``m`` from ``offset``."""
    if n < m:
        return np.array([n - 1])
    starts = np.arange(offset, n - m + 1, m)
    if starts.size == 0:
        starts = np.array([0])
    return starts + m - 1


def window_targets(labels: np.ndarray, t_current, cfg: ModelConfig, base=None, lengths=None):
    """Label rows aligned with model output plus near-future rows, with validity."""
    labels = np.asarray(labels, dtype=np.int64)
    t = np.asarray(t_current, dtype=np.int64).reshape(-1, 1)
    n = np.full_like(t, len(labels)) if lengths is None else \
        np.asarray(lengths, dtype=np.int64).reshape(-1, 1)
    base = np.zeros_like(t) if base is None else np.asarray(base, dtype=np.int64).reshape(-1, 1)
    rows = t - cfg.short_len + 1 + np.arange(cfg.out_rows)
    fut = t - cfg.short_len + 1 + np.arange(cfg.near_future_len)
    out = []
    for idx in (rows, fut):
        ok = (idx >= 0) & (idx < n)
        out.append(torch.from_numpy(labels[base + np.clip(idx, 0, n - 1)] * ok))
        out.append(torch.from_numpy(ok))
    return out


def training_batch(frames, labels, t_current, cfg: ModelConfig, base=None,
                   lengths=None) -> TrainingWindow:
    return TrainingWindow(gather_windows(frames, t_current, cfg, base),
                          *window_targets(labels, t_current, cfg, base, lengths))


def sample_training_windows(stream, labels, cfg: ModelConfig, seed) -> list[TrainingWindow]:
    """Tile the video with stride ``short_len`` from a seeded random offset."""
    m = cfg.short_len
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, m)) if stream.n_frames >= 2 * m else 0
    lab = labels.labels if hasattr(labels, "labels") else labels
    return [training_batch(stream.frames, lab, [t], cfg)
            for t in window_ends(stream.n_frames, m, offset)]


def collate(windows: list[TrainingWindow]) -> TrainingWindow:
    def cat(get):
        return torch.cat([get(w) for w in windows], dim=0)
    inputs = WindowInput(*(cat(lambda w, k=k: getattr(w.inputs, k))
                           for k in ("long_mem", "long_valid", "short_mem", "short_valid",
                                     "near_past", "near_valid")))
    return TrainingWindow(inputs, cat(lambda w: w.labels), cat(lambda w: w.valid),
                          cat(lambda w: w.future_labels), cat(lambda w: w.future_valid))


def _masked_ce(logits: torch.Tensor, labels: torch.Tensor, valid: torch.Tensor):
    if not bool(valid.any()):
        return None
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return -(picked * valid.to(logp.dtype)).sum() / valid.sum()


@dataclass(frozen=True)
class LossWeights:
    initial: float = 1.0
    near_future: float = 1.0


def compute_loss(output: ModelOutput, labels, valid, future_labels=None, future_valid=None,
                 weights: LossWeights = LossWeights()) -> Optional[torch.Tensor]:
    """Mean cross entropy over valid rows; ``None`` when nothing is valid."""
    main = _masked_ce(output.final_logits, labels, valid)
    if main is None:
        return None
    total = main
    if output.refined_logits is not None and weights.initial:
        total = total + weights.initial * _masked_ce(output.frame_logits, labels, valid)
    if output.near_future_logits is not None and future_labels is not None and weights.near_future:
        fut = _masked_ce(output.near_future_logits, future_labels, future_valid)
        if fut is not None:
            total = total + weights.near_future * fut
    return total


def batch_loss(model: StruggleModel, batch: TrainingWindow, train: bool,
               generator=None, weights: LossWeights = LossWeights()):
    out = model(batch.inputs, train=train, generator=generator)
    return compute_loss(out, batch.labels, batch.valid, batch.future_labels,
                        batch.future_valid, weights)
