"""Deterministic synthetic corpus with embedded, learnable struggle episodes.

Background features are per-channel AR(1) noise. During an episode the slow
channels are shifted along a task-specific unit direction and the fast
channels get doubled variance. A linear ramp along the same direction
precedes every onset so that anticipation has something to pick up.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (ACTIVITIES, TASKS_PER_ACTIVITY, FeatureStream, StruggleIntervals,
                   VideoRecord, intervals_to_frame_labels, round_half_away,
                   write_annotations, write_feature_stream, write_manifest)

log = logging.getLogger(__name__)

AR_COEF = 0.9


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureGeometry:
    d_slow: int = 24
    d_fast: int = 8
    fps: float = 3.125


@dataclass(frozen=True)
class ActivityProfile:
    name: str
    struggle_proportion_target: float
    mean_episode_len: float
    episode_len_jitter: float = 0.3
    precursor_len: float = 2.0
    signal_strength: float = 2.0
    noise_scale: float = 1.0
    attempt_multipliers: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    signal_family: int = 0

    def __post_init__(self):
        if not 0 < self.struggle_proportion_target < 1:
            raise ValueError("struggle proportion must be in (0, 1)")
        if self.precursor_len < 0:
            raise ValueError("precursor_len must be >= 0")
        if len(self.attempt_multipliers) != 5 or min(self.attempt_multipliers) <= 0:
            raise ValueError("need five positive attempt multipliers")


# Learning curves: Origami steepest, ShuffleCards flattest.
DEFAULT_PROFILES = (
    ActivityProfile("TyingKnots", 0.42, 14.0, attempt_multipliers=(1.0, 0.9, 0.8, 0.72, 0.65)),
    ActivityProfile("Origami", 0.25, 12.0, attempt_multipliers=(1.0, 0.7, 0.45, 0.3, 0.2)),
    ActivityProfile("Tangram", 0.49, 16.0, attempt_multipliers=(1.0, 0.88, 0.78, 0.7, 0.62)),
    ActivityProfile("ShuffleCards", 0.29, 8.0, attempt_multipliers=(1.0, 0.97, 0.94, 0.92, 0.9)),
)


def default_profile(name: str) -> ActivityProfile:
    return next(p for p in DEFAULT_PROFILES if p.name == name)


@dataclass
class CorpusConfig:
    profiles: tuple = DEFAULT_PROFILES
    tasks_per_activity: int = 2
    participants: int = 3
    attempts: int = 5
    video_duration: float = 320.0
    geometry: FeatureGeometry = field(default_factory=FeatureGeometry)
    master_seed: int = 0

    def __post_init__(self):
        for name in ("tasks_per_activity", "participants", "attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.attempts > 5:
            raise ValueError("at most 5 attempts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = [asdict(p) for p in self.profiles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        if "profiles" in d:
            d["profiles"] = tuple(
                ActivityProfile(**{**p, "attempt_multipliers": tuple(p["attempt_multipliers"])})
                if "struggle_proportion_target" in p
                else replace(default_profile(p["name"]), **{k: v for k, v in p.items()
                                                            if k != "name"})
                for p in d["profiles"])
        if "geometry" in d:
            d["geometry"] = FeatureGeometry(**d["geometry"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "CorpusConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_signal(self, strength: float) -> "CorpusConfig":
        return replace(self, profiles=tuple(replace(p, signal_strength=strength)
                                            for p in self.profiles))


def task_direction(task_id: int, d_slow: int, family: int = 0) -> np.ndarray:
    rng = np.random.default_rng([7919, family, task_id])
    u = rng.standard_normal(d_slow)
    return u / np.linalg.norm(u)


def _ar1(rng: np.random.Generator, n: int, d: int, scale: np.ndarray) -> np.ndarray:
    """AR(1) noise with stationary std ``scale`` (per frame, per channel)."""
    innov = rng.standard_normal((n, d)) * math.sqrt(1 - AR_COEF ** 2)
    x = np.empty((n, d))
    prev = rng.standard_normal(d)
    for t in range(n):
        prev = AR_COEF * prev + innov[t]
        x[t] = prev
    return x * scale


def _episode_lengths(rng, total: float, profile: ActivityProfile, min_len: float):
    sigma = max(profile.episode_len_jitter, 1e-6)
    mu = math.log(profile.mean_episode_len) - sigma ** 2 / 2
    lengths = []
    while sum(lengths) < total:
        lengths.append(max(min_len, float(rng.lognormal(mu, sigma))))
    excess = sum(lengths) - total
    lengths[-1] -= excess
    if lengths[-1] < min_len:
        tail = lengths.pop()
        if lengths:
            lengths[-1] += tail
        else:
            lengths = [total]
    return lengths


def place_episodes(rng, duration: float, lengths, min_gap: float, retries: int = 20):
    """Non-overlapping placement with at least ``min_gap`` free seconds before each onset."""
    k = len(lengths)
    for _ in range(retries):
        order = rng.permutation(k)
        free = duration - sum(lengths) - k * min_gap
        if free < 0:
            raise PlacementError(
                f"cannot place {k} episodes ({sum(lengths):.1f}s) in {duration:.1f}s "
                f"with {min_gap:.2f}s gaps; use shorter episodes")
        gaps = rng.dirichlet(np.ones(k + 1)) * free
        out, t = [], 0.0
        for i, j in enumerate(order):
            t += gaps[i] + min_gap
            out.append((t, t + lengths[j]))
            t += lengths[j]
        if out[-1][1] <= duration + 1e-9:
            return [(s, min(e, duration)) for s, e in out]
    raise PlacementError("episode placement failed after retries; use shorter episodes")


def generate_video(profile: ActivityProfile, task_id: int, seed, duration: float,
                   geometry: FeatureGeometry, attempt: int = 1, video_id: Optional[str] = None):
    """Return ``(FeatureStream, StruggleIntervals)`` for one synthetic recording."""
    rng = np.random.default_rng(seed)
    fps = geometry.fps
    n = max(1, round_half_away(duration * fps))
    vid = video_id or f"{profile.name}_T{task_id}"

    target = profile.struggle_proportion_target * profile.attempt_multipliers[attempt - 1]
    frame = 1.0 / fps
    lengths = _episode_lengths(rng, target * duration, profile, min_len=2 * frame)
    # the labelled run of an episode covers one extra frame (closed interval)
    lengths = [max(2 * frame, L - frame) for L in lengths]
    min_gap = profile.precursor_len + 3 * frame
    episodes = place_episodes(rng, duration - frame, lengths, min_gap)
    intervals = StruggleIntervals(vid, episodes, duration)
    labels = intervals_to_frame_labels(intervals, fps, n).labels

    d_slow, d_fast = geometry.d_slow, geometry.d_fast
    strength = profile.signal_strength
    slow = _ar1(rng, n, d_slow, np.full(d_slow, profile.noise_scale))
    fast_scale = np.full((n, 1), profile.noise_scale)
    if strength > 0:
        fast_scale[labels == 1] *= math.sqrt(2.0)
    fast = _ar1(rng, n, d_fast, 1.0) * fast_scale

    drive = labels.astype(np.float64) * strength
    p = round_half_away(profile.precursor_len * fps)
    if p > 0 and strength > 0:
        for s, _ in episodes:
            onset = round_half_away(s * fps)
            for k in range(max(0, onset - p), onset):
                drive[k] = max(drive[k], strength * (k - (onset - p)) / p)
    slow += drive[:, None] * task_direction(task_id, d_slow, profile.signal_family)[None, :]

    feats = np.concatenate([slow, fast], axis=1).astype(np.float32).astype(np.float64)
    return FeatureStream(vid, feats, fps, d_slow, d_fast), intervals


def video_seed(master_seed: int, activity: str, task: int, participant: int, attempt: int):
    return np.random.SeedSequence([master_seed, ACTIVITIES.index(activity), task,
                                   participant, attempt])


def iter_corpus(config: CorpusConfig):
    """Yield ``(VideoRecord, FeatureStream, StruggleIntervals)`` in manifest order."""
    for prof in config.profiles:
        n_tasks = min(config.tasks_per_activity, TASKS_PER_ACTIVITY[prof.name])
        for task in range(1, n_tasks + 1):
            for part in range(1, config.participants + 1):
                for attempt in range(1, config.attempts + 1):
                    vid = f"{prof.name}_T{task}_P{part:02d}_A{attempt}"
                    stream, iv = generate_video(
                        prof, task, video_seed(config.master_seed, prof.name, task, part, attempt),
                        config.video_duration, config.geometry, attempt, vid)
                    rec = VideoRecord(vid, prof.name, task, f"P{part:02d}", attempt,
                                      config.video_duration)
                    yield rec, stream, iv


def generate_corpus(config: CorpusConfig, out_dir) -> list[VideoRecord]:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records, intervals = [], []
    for rec, stream, iv in iter_corpus(config):
        path = out / "features" / f"{rec.video_id}.osdf"
        try:
            write_feature_stream(stream, path)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        records.append(rec)
        intervals.append(iv)
    write_manifest(records, out / "manifest.json")
    write_annotations(intervals, out / "annotations.json")
    (out / "corpus_config.json").write_text(json.dumps(config.to_dict(), indent=1,
                                                       sort_keys=True) + "\n")
    log.info("wrote %d videos to %s", len(records), out)
    return records


def realized_proportions(records, intervals: dict, fps: float) -> dict:
    """Positive-frame fraction per (activity, attempt)."""
    acc: dict = {}
    for r in records:
        n = max(1, round_half_away(r.duration * fps))
        lab = intervals_to_frame_labels(intervals[r.video_id], fps, n).labels
        pos, tot = acc.get((r.activity, r.attempt), (0, 0))
        acc[(r.activity, r.attempt)] = (pos + int(lab.sum()), tot + n)
    return {k: p / t for k, (p, t) in acc.items()}


def corpus_hash(out_dir) -> str:
    """SHA-256 over manifest, annotations and every feature file."""
    out = Path(out_dir)
    h = hashlib.sha256()
    for name in ("manifest.json", "annotations.json"):
        h.update((out / name).read_bytes())
    for f in sorted((out / "features").glob("*.osdf")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()
