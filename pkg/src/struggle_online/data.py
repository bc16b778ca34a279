"""Videos, feature streams, annotations, label conversion and splits."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVITIES = ("TyingKnots", "Origami", "Tangram", "ShuffleCards")
TASKS_PER_ACTIVITY = {"TyingKnots": 5, "Origami": 4, "Tangram": 4, "ShuffleCards": 5}

FEATURE_MAGIC = b"OSDF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHHIHH")


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class InconsistentDims(FormatError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    activity: str
    task_id: int
    participant_id: str
    attempt: int
    duration: float

    def __post_init__(self):
        if self.activity not in ACTIVITIES:
            raise ValueError(f"unknown activity {self.activity!r}")
        if not 1 <= self.task_id <= TASKS_PER_ACTIVITY[self.activity]:
            raise ValueError(f"{self.activity} has no task {self.task_id}")
        if not 1 <= self.attempt <= 5:
            raise ValueError(f"attempt must be in 1..5, got {self.attempt}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class FeatureStream:
    video_id: str
    frames: np.ndarray
    feature_fps: float
    d_slow: int
    d_fast: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InconsistentDims("frames must be a 2-d matrix")
        if self.d_slow + self.d_fast != self.frames.shape[1]:
            raise InconsistentDims(
                f"d_slow + d_fast = {self.d_slow + self.d_fast} != {self.frames.shape[1]}")
        if self.feature_fps <= 0:
            raise ValueError("feature_fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def d_total(self) -> int:
        return self.d_slow + self.d_fast


@dataclass
class StruggleIntervals:
    video_id: str
    episodes: list = field(default_factory=list)
    duration: Optional[float] = None

    def __post_init__(self):
        self.episodes = [(float(s), float(e)) for s, e in self.episodes]
        for s, e in self.episodes:
            if not 0 <= s < e:
                raise ValueError(f"invalid episode ({s}, {e})")
            if self.duration is not None and e > self.duration:
                log.warning("episode (%s, %s) ends past video end %s", s, e, self.duration)


@dataclass
class FrameLabelTrack:
    video_id: str
    labels: np.ndarray
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def intervals_to_frame_labels(intervals: StruggleIntervals, feature_fps: float,
                              n: int) -> FrameLabelTrack:
    """Frame k is positive iff round(s*fps) <= k <= round(e*fps) for some episode."""
    if n < 1:
        raise ValueError("N must be >= 1")
    labels = np.zeros(n, dtype=np.int64)
    warnings = []
    for s, e in intervals.episodes:
        lo = round_half_away(s * feature_fps)
        hi = round_half_away(e * feature_fps)
        if hi > n - 1:
            warnings.append(f"episode ({s}, {e}) clamped to frame {n - 1}")
            log.warning(warnings[-1])
        lo, hi = max(lo, 0), min(hi, n - 1)
        if lo <= hi:
            labels[lo:hi + 1] = 1
    return FrameLabelTrack(intervals.video_id, labels, warnings)


# -- feature files -------------------------------------------------------

def write_feature_stream(stream: FeatureStream, path) -> None:
    n, d = stream.frames.shape
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, n, stream.d_slow, stream.d_fast)
    payload = np.ascontiguousarray(stream.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<d", stream.feature_fps))


def read_feature_stream(path, video_id: Optional[str] = None) -> FeatureStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: truncated header")
    magic, version, _reserved, n, d_slow, d_fast = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FEATURE_VERSION}")
    d = d_slow + d_fast
    expected = _HEADER.size + 4 * n * d + 8
    if len(raw) < expected:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise InconsistentDims(f"{path}: {len(raw) - expected} trailing bytes; header dims wrong")
    frames = np.frombuffer(raw, dtype="<f4", count=n * d, offset=_HEADER.size)
    (fps,) = struct.unpack_from("<d", raw, _HEADER.size + 4 * n * d)
    return FeatureStream(video_id or path.stem, frames.reshape(n, d).astype(np.float64),
                         fps, d_slow, d_fast)


def write_feature_header_raw(path, n: int, d_slow: int, d_fast: int, payload_cols: int,
                             magic: bytes = FEATURE_MAGIC, version: int = FEATURE_VERSION) -> None:
    """Write a deliberately malformed file; used to exercise reader errors."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, version, 0, n, d_slow, d_fast))
        fh.write(np.zeros(n * payload_cols, dtype="<f4").tobytes())
        fh.write(struct.pack("<d", 3.125))


# -- manifests & annotations ---------------------------------------------

def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(records: Sequence[VideoRecord], path) -> None:
    _dump([asdict(r) for r in records], path)


def read_manifest(path) -> list[VideoRecord]:
    return [VideoRecord(**r) for r in json.loads(Path(path).read_text())]


def write_annotations(intervals: Iterable[StruggleIntervals], path) -> None:
    _dump({iv.video_id: {"duration": iv.duration, "episodes": [list(e) for e in iv.episodes]}
           for iv in intervals}, path)


def read_annotations(path) -> dict[str, StruggleIntervals]:
    raw = json.loads(Path(path).read_text())
    return {vid: StruggleIntervals(vid, [tuple(e) for e in v["episodes"]], v.get("duration"))
            for vid, v in raw.items()}


# -- splits -------------------------------------------------------------

class SplitMode(str, Enum):
    WITHIN_ACTIVITY = "WithinActivity"
    COMBINED_ALL = "CombinedAll"
    LEAVE_ONE_ACTIVITY_OUT = "LeaveOneActivityOut"
    LEAVE_ONE_TASK_OUT = "LeaveOneTaskOut"
    ATTEMPT_FILTER = "AttemptFilter"
    CROSS_ACTIVITY_ZERO_SHOT = "CrossActivityZeroShot"


@dataclass(frozen=True)
class SplitSpec:
    """Selector for one train/validation split.

    ``activity`` names the held-out activity for LeaveOneActivityOut and the
    training activity for the other per-activity modes. ``eval_activity`` is
    the target of CrossActivityZeroShot. With ``participant_disjoint`` set,
    the last ``val_fraction`` of participants (sorted by id) are validation.
    """
    mode: SplitMode
    activity: Optional[str] = None
    eval_activity: Optional[str] = None
    task_id: Optional[int] = None
    train_attempts: tuple = (1, 2, 3, 4, 5)
    eval_attempts: tuple = (1, 2, 3, 4, 5)
    participant_disjoint: bool = True
    val_fraction: float = 1 / 3


def val_participants(manifest: Sequence[VideoRecord], fraction: float) -> set[str]:
    ids = sorted({r.participant_id for r in manifest})
    k = min(len(ids) - 1, max(1, round(len(ids) * fraction))) if len(ids) > 1 else 0
    return set(ids[len(ids) - k:])


def build_split(manifest: Sequence[VideoRecord], spec: SplitSpec):
    if not manifest:
        raise SplitError("empty manifest")
    mode = SplitMode(spec.mode)
    acts = {r.activity for r in manifest}
    for a in (spec.activity, spec.eval_activity):
        if a is not None and a not in acts:
            raise SplitError(f"activity {a!r} not in manifest")

    held = val_participants(manifest, spec.val_fraction) if spec.participant_disjoint else None

    def side(r: VideoRecord, is_val: bool) -> bool:
        if held is None:
            return True
        return (r.participant_id in held) == is_val

    if mode is SplitMode.LEAVE_ONE_ACTIVITY_OUT:
        train = [r for r in manifest if r.activity != spec.activity and side(r, False)]
        val = [r for r in manifest if r.activity == spec.activity and side(r, True)]
    elif mode is SplitMode.LEAVE_ONE_TASK_OUT:
        pool = [r for r in manifest if r.activity == spec.activity]
        if spec.task_id not in {r.task_id for r in pool}:
            raise SplitError(f"task {spec.task_id} not in {spec.activity}")
        train = [r for r in pool if r.task_id != spec.task_id and side(r, False)]
        val = [r for r in pool if r.task_id == spec.task_id and side(r, True)]
    elif mode is SplitMode.CROSS_ACTIVITY_ZERO_SHOT:
        train = [r for r in manifest if r.activity == spec.activity and side(r, False)]
        val = [r for r in manifest if r.activity == spec.eval_activity and side(r, True)]
    else:
        pool = [r for r in manifest
                if mode is SplitMode.COMBINED_ALL or spec.activity is None
                or r.activity == spec.activity]
        train = [r for r in pool if side(r, False)]
        val = [r for r in pool if side(r, True)]
        if held is None:
            # without participant hold-out, split by attempt parity to stay disjoint
            val = [r for r in val if r.attempt % 2 == 0]
            train = [r for r in train if r.attempt % 2 == 1]
        if mode is SplitMode.ATTEMPT_FILTER:
            train = [r for r in train if r.attempt in spec.train_attempts]
            val = [r for r in val if r.attempt in spec.eval_attempts]
        elif mode is not SplitMode.WITHIN_ACTIVITY and mode is not SplitMode.COMBINED_ALL:
            raise SplitError(f"unsupported mode {mode}")

    if not train or not val:
        raise SplitError(f"empty {'train' if not train else 'val'} set for {spec}")
    assert_disjoint(train, val, participant=spec.participant_disjoint)
    return train, val


def assert_disjoint(train, val, participant: bool = False) -> None:
    if {r.video_id for r in train} & {r.video_id for r in val}:
        raise SplitError("train and val share videos")
    if participant and {r.participant_id for r in train} & {r.participant_id for r in val}:
        raise SplitError("train and val share participants")
