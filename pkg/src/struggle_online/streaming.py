"""Causal frame-by-frame inference, batched equivalent, and runtime profiling."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .models import StruggleModel, gather_windows, multiply_adds_per_step, param_count, \
    window_indices, WindowInput
from .nn import ShapeError


@dataclass
class PredictionFrame:
    t: int
    detection_prob: float
    anticipation_probs: np.ndarray
    latency_ms: float = 0.0


@dataclass
class PredictionTrack:
    video_id: str
    frames: list = field(default_factory=list)

    @property
    def detection(self) -> np.ndarray:
        return np.array([f.detection_prob for f in self.frames])

    @property
    def anticipation(self) -> np.ndarray:
        d = len(self.frames[0].anticipation_probs) if self.frames else 0
        return np.array([f.anticipation_probs for f in self.frames]).reshape(len(self.frames), d)


def _probs(model: StruggleModel, inp: WindowInput) -> np.ndarray:
    with torch.no_grad():
        logits = model(inp, train=False).final_logits
        return torch.softmax(logits, dim=-1)[..., 1].numpy()


class StreamEngine:
    """Holds the last ``history_len`` raw frames in a ring buffer and predicts at each step."""

    def __init__(self, model: StruggleModel):
        self.model = model.eval()
        self.cfg = model.cfg
        self.capacity = self.cfg.history_len
        self.reset()

    def reset(self) -> None:
        self.buffer = np.zeros((self.capacity, self.cfg.d_total))
        self.t = -1

    def _window(self) -> WindowInput:
        idx = [i.reshape(-1) for i in window_indices([self.t], self.cfg)]
        # every index read is within the last `capacity` frames or is padding
        rows = np.concatenate([np.where(i >= 0, i, 0) for i in idx]) % self.capacity
        view = self.buffer[rows]
        sizes = [len(i) for i in idx]
        parts = np.split(view, np.cumsum(sizes)[:-1])
        out = []
        for feats, i in zip(parts, idx):
            out.append(torch.from_numpy(feats[None]))
            out.append(torch.from_numpy((i >= 0)[None]))
        return WindowInput(*out)

    def step(self, frame) -> PredictionFrame:
        frame = np.asarray(frame, dtype=np.float64).ravel()
        if frame.shape[0] != self.cfg.d_total:
            raise ShapeError(f"frame has {frame.shape[0]} dims, expected {self.cfg.d_total}")
        self.t += 1
        self.buffer[self.t % self.capacity] = frame
        inp = self._window()
        t0 = time.perf_counter_ns()
        p = _probs(self.model, inp)[0]
        latency = (time.perf_counter_ns() - t0) / 1e6
        m = self.cfg.short_len
        return PredictionFrame(self.t, float(p[m - 1]), p[m:].copy(), latency)


def run_stream(engine_factory: Callable[[], StreamEngine], stream) -> PredictionTrack:
    if stream.n_frames < 1:
        raise ValueError("empty stream")
    engine = engine_factory()
    return PredictionTrack(stream.video_id, [engine.step(x) for x in stream.frames])


def predict_video(model: StruggleModel, frames, chunk: int = 1024):
    """Batched evaluation of every stream position: ``(det (N,), ant (N, delta))``."""
    model.eval()
    frames = np.asarray(frames, dtype=np.float64)
    n, m = len(frames), model.cfg.short_len
    det, ant = [], []
    for lo in range(0, n, chunk):
        p = _probs(model, gather_windows(frames, np.arange(lo, min(n, lo + chunk)), model.cfg))
        det.append(p[:, m - 1])
        ant.append(p[:, m:])
    return np.concatenate(det), np.concatenate(ant)


def predict_dataset(model: StruggleModel, streams: Sequence):
    det, ant = [], []
    for s in streams:
        d, a = predict_video(model, s.frames)
        det.append(d)
        ant.append(a)
    return det, ant


def track_from_arrays(video_id: str, det, ant) -> PredictionTrack:
    return PredictionTrack(video_id, [PredictionFrame(t, float(d), np.asarray(a))
                                      for t, (d, a) in enumerate(zip(det, ant))])


def write_track(track: PredictionTrack, path, with_latency: bool = True) -> None:
    delta = track.anticipation.shape[1]
    cols = ["video_id", "t", "detection_prob"] + [f"ant_{j}" for j in range(1, delta + 1)]
    if with_latency:
        cols.append("latency_ms")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for f in track.frames:
            row = [track.video_id, f.t, repr(f.detection_prob)]
            row += [repr(float(a)) for a in f.anticipation_probs]
            if with_latency:
                row.append(f"{f.latency_ms:.4f}")
            w.writerow(row)


def read_track(path) -> PredictionTrack:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty track")
    ant_cols = sorted((c for c in rows[0] if c.startswith("ant_")), key=lambda c: int(c[4:]))
    frames = [PredictionFrame(int(r["t"]), float(r["detection_prob"]),
                              np.array([float(r[c]) for c in ant_cols]),
                              float(r.get("latency_ms") or 0.0)) for r in rows]
    return PredictionTrack(rows[0]["video_id"], frames)


@dataclass
class RuntimeReport:
    mean_ms: float
    median_ms: float
    p95_ms: float
    steps_per_second: float
    param_count: int
    multiply_adds: int
    steps: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def profile(engine: StreamEngine, stream, warmup_steps: int = 10) -> RuntimeReport:
    if stream.n_frames <= warmup_steps:
        raise ValueError("stream must be longer than the warmup")
    engine.reset()
    lat = np.array([engine.step(x).latency_ms for x in stream.frames])[warmup_steps:]
    mean = float(lat.mean())
    return RuntimeReport(mean, float(np.median(lat)), float(np.percentile(lat, 95)),
                         1000.0 / mean, param_count(engine.model),
                         multiply_adds_per_step(engine.cfg), int(lat.size))
