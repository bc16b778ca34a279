"""Windowed training with Adam, linear warmup and cosine decay; checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .models import (LossWeights, ModelConfig, StruggleModel, batch_loss, build_model,
                     training_batch, window_ends)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OSDM"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    base_lr: float = 2e-3
    warmup_epochs: int = 3
    warmup_start_lr: float = 2e-4
    weight_decay: float = 5e-3
    seed: int = 0
    near_future_loss_weight: float = 1.0
    initial_head_loss_weight: float = 1.0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.base_lr <= 0:
            raise ValueError("epochs, batch_size and base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")

    def to_dict(self) -> dict:
        return asdict(self)

    def weights(self) -> LossWeights:
        return LossWeights(self.initial_head_loss_weight, self.near_future_loss_weight)


def learning_rate(progress: float, cfg: TrainConfig) -> float:
    """LR at fractional epoch ``progress``: linear warmup, then cosine to 0 at ``epochs``."""
    w = cfg.warmup_epochs
    if progress < w:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * progress / w
    frac = min(1.0, (progress - w) / (cfg.epochs - w))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _epoch_windows(dataset, m: int, rng: np.random.Generator):
    items = []
    for vi, (stream, _labels) in enumerate(dataset):
        n = stream.n_frames
        offset = int(rng.integers(0, m)) if n >= 2 * m else 0
        items += [(vi, int(t)) for t in window_ends(n, m, offset)]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


class _Packed:
    """All training videos back to back so a batch is one fancy-index away."""

    def __init__(self, dataset):
        self.frames = np.concatenate([s.frames for s, _ in dataset])
        self.labels = np.concatenate([lab for _, lab in dataset])
        self.lengths = np.array([s.n_frames for s, _ in dataset])
        self.starts = np.r_[0, np.cumsum(self.lengths)[:-1]]

    def batch(self, items, cfg: ModelConfig):
        vi = np.array([v for v, _ in items])
        t = np.array([t for _, t in items])
        return training_batch(self.frames, self.labels, t, cfg, self.starts[vi],
                              self.lengths[vi])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Sequence,
          out_path=None, val: Optional[Sequence] = None, val_every: int = 1):
    """Train a fresh model on ``dataset`` = [(FeatureStream, label array), ...].

    Returns ``(model, log_rows)``. With ``val`` given, detection cAP on it is
    logged every ``val_every`` epochs and after the last one.
    """
    if not dataset:
        raise ValueError("empty training set")
    dataset = [(s, np.asarray(getattr(lab, "labels", lab))) for s, lab in dataset]
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg, seed=train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.warmup_start_lr,
                           betas=(0.9, 0.999), eps=1e-8, weight_decay=train_cfg.weight_decay)
    drop_gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    weights = train_cfg.weights()
    packed = _Packed(dataset)
    rows = []
    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        items = _epoch_windows(dataset, model_cfg.short_len, rng)
        bs = train_cfg.batch_size
        n_steps = math.ceil(len(items) / bs)
        model.train()
        total, count, lr = 0.0, 0, train_cfg.warmup_start_lr
        for step in range(n_steps):
            lr = learning_rate(epoch + step / n_steps, train_cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = packed.batch(items[step * bs:(step + 1) * bs], model_cfg)
            loss = batch_loss(model, batch, True, drop_gen, weights)
            if loss is None:
                continue
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        model.eval()
        row = {"epoch": epoch + 1, "lr": lr, "loss": total / max(count, 1)}
        if val and ((epoch + 1) % val_every == 0 or epoch + 1 == train_cfg.epochs):
            from .streaming import predict_dataset
            from .metrics import frame_cap
            det, _ = predict_dataset(model, [s for s, _ in val])
            labs = np.concatenate([np.asarray(getattr(l, "labels", l)) for _, l in val])
            row["val_cap"] = frame_cap(np.concatenate(det), labs) if 0 < labs.sum() < labs.size \
                else None
        rows.append(row)
        log.info("epoch %d lr %.2e loss %.4f%s", epoch + 1, lr, row["loss"],
                 f" val cAP {row['val_cap']:.4f}" if row.get("val_cap") is not None else "")
    if out_path is not None:
        save_checkpoint(model, out_path, train_cfg)
        write_log(rows, Path(out_path).with_suffix(".log.csv"))
    return model, rows


def write_log(rows, path) -> None:
    keys = ["epoch", "lr", "loss", "val_cap"]
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join("" if r.get(k) is None else repr(r[k]) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(model: StruggleModel, path, train_cfg: Optional[TrainConfig] = None) -> None:
    params = [(n, p.detach()) for n, p in model.named_parameters()]
    header = json.dumps({
        "version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "params": [[n, list(p.shape)] for n, p in params],
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        for _, p in params:
            fh.write(p.numpy().astype("<f8").tobytes())


def load_checkpoint(path) -> StruggleModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[10:10 + hlen])
    model = build_model(ModelConfig.from_dict(header["config"]))
    named = dict(model.named_parameters())
    off = 10 + hlen
    with torch.no_grad():
        for name, shape in header["params"]:
            if name not in named or list(named[name].shape) != shape:
                raise CheckpointError(f"{path}: parameter {name} {shape} does not fit config")
            k = int(np.prod(shape)) if shape else 1
            if off + 8 * k > len(raw):
                raise CheckpointError(f"{path}: truncated payload")
            arr = np.frombuffer(raw, dtype="<f8", count=k, offset=off).reshape(shape)
            named[name].copy_(torch.from_numpy(arr.copy()))
            off += 8 * k
    model.eval()
    return model
