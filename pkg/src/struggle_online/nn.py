"""Dense building blocks shared by both temporal models.

Everything runs in float64. Attention masks are boolean tensors where True
means "may attend"; disallowed logits get ``NEG_INF`` added before the
softmax so they receive exactly zero weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
NEG_INF = -1e30


class ShapeError(ValueError):
    pass


class EmptyAttentionRow(ValueError):
    pass


def causal_mask(n: int, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Lower-triangular mask; with ``valid`` given, invalid keys are dropped.

    The diagonal is always kept so padded query rows still have a key.
    """
    tri = torch.ones(n, n, dtype=torch.bool).tril()
    if valid is None:
        return tri
    keep = tri & valid[..., None, :]
    return keep | torch.eye(n, dtype=torch.bool)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is True."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise EmptyAttentionRow("empty attention row")
    logits = logits + (~mask).to(logits.dtype) * NEG_INF
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(logits)
    return e / e.sum(dim=-1, keepdim=True)


def init_uniform_fan_in(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded init: linear weights/biases and free embeddings in +-1/sqrt(fan_in)."""
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        with torch.no_grad():
            if ".norm" in f".{name}" and leaf in ("weight", "bias"):
                p.fill_(1.0 if leaf == "weight" else 0.0)
                continue
            fan_in = p.shape[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.Linear):
                fan_in = owner.in_features
            bound = 1.0 / math.sqrt(fan_in)
            u = torch.rand(p.shape, generator=generator, dtype=DTYPE)
            p.copy_((2.0 * u - 1.0) * bound)


def dropout(x: torch.Tensor, rate: float, train: bool,
            generator: Optional[torch.Generator]) -> torch.Tensor:
    # inverted dropout; identity outside training
    if not train or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ShapeError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        return multi_head_attention(query, key, value, mask, self)


def multi_head_attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                         mask: torch.Tensor, params: MultiHeadAttention) -> torch.Tensor:
    """Scaled dot-product attention with ``params.heads`` heads.

    Shapes are ``(..., Q, d)``, ``(..., K, d)`` and a ``(..., Q, K)`` mask that
    broadcasts against the leading batch axes.
    """
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"key rows {key.shape[-2]} != value rows {value.shape[-2]}")
    if mask.shape[-2:] != (query.shape[-2], key.shape[-2]):
        raise ShapeError(
            f"mask {tuple(mask.shape[-2:])} vs query/key {query.shape[-2]}x{key.shape[-2]}")
    for t in (query, key, value):
        if t.shape[-1] != params.d_model:
            raise ShapeError(f"feature dim {t.shape[-1]} != d_model {params.d_model}")
    h = params.heads
    dh = params.d_model // h

    def split(x):
        return x.reshape(*x.shape[:-1], h, dh).transpose(-3, -2)

    q = split(params.q(query))
    k = split(params.k(key))
    v = split(params.v(value))
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    w = masked_softmax(scores, mask.unsqueeze(-3))
    ctx = (w @ v).transpose(-3, -2)
    return params.out(ctx.reshape(*ctx.shape[:-2], params.d_model))


@dataclass(frozen=True)
class DecoderLayerSpec:
    d_model: int
    heads: int
    ff_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ShapeError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer: self-attention, cross-attention, feed-forward."""

    def __init__(self, spec: DecoderLayerSpec):
        super().__init__()
        self.spec = spec
        d = spec.d_model
        self.norm_self = nn.LayerNorm(d, dtype=DTYPE)
        self.self_attn = MultiHeadAttention(d, spec.heads)
        self.norm_cross = nn.LayerNorm(d, dtype=DTYPE)
        self.cross_attn = MultiHeadAttention(d, spec.heads)
        self.norm_ff = nn.LayerNorm(d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, spec.ff_dim, dtype=DTYPE)
        self.ff2 = nn.Linear(spec.ff_dim, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor, memory: Optional[torch.Tensor],
                self_mask: torch.Tensor, cross_mask: Optional[torch.Tensor],
                train: bool = False, generator: Optional[torch.Generator] = None,
                memory_gate: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``memory_gate`` (shape ``(B,)``, 0/1) switches cross-attention off per sample.

        Gated-off samples must still carry a non-empty ``cross_mask`` row; their
        attention output is multiplied by zero.
        """
        rate = self.spec.dropout_rate
        h = self.norm_self(x)
        x = x + dropout(self.self_attn(h, h, h, self_mask), rate, train, generator)
        if memory is not None and memory.shape[-2] > 0:
            h = self.norm_cross(x)
            a = self.cross_attn(h, memory, memory, cross_mask)
            if memory_gate is not None:
                a = a * memory_gate.reshape(-1, *([1] * (a.dim() - 1))).to(a.dtype)
            x = x + dropout(a, rate, train, generator)
        h = self.norm_ff(x)
        f = self.ff2(torch.nn.functional.gelu(self.ff1(h)))
        return x + dropout(f, rate, train, generator)


def decoder_layer_param_count(d_model: int, ff_dim: int) -> int:
    attn = 4 * (d_model * d_model + d_model)
    norms = 3 * 2 * d_model
    ff = d_model * ff_dim + ff_dim + ff_dim * d_model + d_model
    return 2 * attn + norms + ff


def cross_entropy_from_logits(logits, labels):
    """Per-frame two-class cross entropy and its gradient w.r.t. the logits.

    Returns ``(loss, grad)`` with ``loss`` of shape ``(n,)`` and ``grad`` of shape
    ``(n, 2)``.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = np.arange(len(y))
    top = z.argmax(axis=1)
    e = np.exp(z - z[rows, top][:, None])
    e[rows, top] = 0.0
    # log-sum-exp relative to the max, via log1p so tiny losses keep full precision
    lse_shift = np.log1p(e.sum(axis=1))
    loss = lse_shift - (z[rows, y] - z[rows, top])
    p = np.exp(z - (z[rows, top] + lse_shift)[:, None])
    grad = p.copy()
    # p_y - 1 written as minus the other classes' mass to avoid cancellation
    p_other = p.copy()
    p_other[rows, y] = 0.0
    grad[rows, y] = -p_other.sum(axis=1)
    return loss, grad


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: nn.Module,
                   eps: float = 1e-6, samples: int = 200, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` must be deterministic. Coordinates are sampled uniformly over
    all trainable entries.
    """
    named = [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss in gradient check")
    loss.backward()
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(samples, int(offsets[-1])), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            _, p = named[i]
            idx = np.unravel_index(int(flat - offsets[i]), tuple(p.shape))
            analytic = float(p.grad[idx]) if p.grad is not None else 0.0
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(loss_fn())
            p[idx] = orig - eps
            down = float(loss_fn())
            p[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError("non-finite loss in gradient check")
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
