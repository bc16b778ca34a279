"""Frame- and event-level evaluation for online detection and anticipation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_TAUS = (0.1, 0.3, 0.5)
EVENT_ECE_TAU = 0.3


class MetricError(ValueError):
    pass


def _ranked(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    order = np.argsort(-scores, kind="stable")
    return scores[order], labels[order]


def frame_cap(scores, labels) -> float:
    """Calibrated average precision (precision reweighted by #neg/#pos)."""
    _, y = _ranked(scores, labels)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise MetricError("cAP undefined: need both positive and negative frames")
    w = neg / pos
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    cprec = tp / (tp + fp / w)
    return float(cprec[y == 1].mean())


def frame_ap(scores, labels) -> float:
    _, y = _ranked(scores, labels)
    if y.sum() == 0:
        raise MetricError("AP undefined: no positive frames")
    tp = np.cumsum(y)
    prec = tp / np.arange(1, len(y) + 1)
    return float(prec[y == 1].mean())


def _try_cap(scores, labels) -> Optional[float]:
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        return None
    return frame_cap(scores, labels)


def anticipation_pairs(ant_probs: Sequence[np.ndarray], labels: Sequence[np.ndarray], j: int):
    """Pool (prediction at T for offset j, label at T+j) pairs; pairs past the end drop."""
    s, y = [], []
    for p, lab in zip(ant_probs, labels):
        p = np.asarray(p).reshape(len(lab), -1)
        n = len(lab)
        if n - j > 0:
            s.append(p[: n - j, j - 1])
            y.append(np.asarray(lab)[j:])
    if not s:
        return np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(s), np.concatenate(y)


def anticipation_cap(det_probs, ant_probs, labels, delta: int, pooled: bool = False) -> dict:
    """Per-offset cAP for offsets ``1..delta`` and their unweighted mean.

    With ``pooled`` the mean is replaced by one cAP over all offset pairs.
    ``delta == 0`` reports the detection cAP as the mean.
    """
    if delta == 0:
        return {"per_offset": [], "mean": frame_cap(np.concatenate(det_probs),
                                                    np.concatenate(labels))}
    per = []
    all_s, all_y = [], []
    for j in range(1, delta + 1):
        s, y = anticipation_pairs(ant_probs, labels, j)
        per.append(_try_cap(s, y))
        all_s.append(s)
        all_y.append(y)
    if pooled:
        mean = _try_cap(np.concatenate(all_s), np.concatenate(all_y))
    else:
        present = [v for v in per if v is not None]
        mean = float(np.mean(present)) if present else None
    return {"per_offset": per, "mean": mean}


# -- events --------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    start: int
    end: int
    confidence: Optional[float] = None

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def extract_events(binary, probs=None) -> list[Event]:
    """Maximal runs of ones as inclusive ``(start, end)`` segments."""
    b = np.asarray(binary).astype(np.int8).ravel()
    if b.size == 0:
        return []
    edges = np.diff(np.concatenate([[0], b, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    out = []
    for s, e in zip(starts, ends):
        conf = None if probs is None else float(np.mean(np.asarray(probs)[s:e + 1]))
        out.append(Event(int(s), int(e), conf))
    return out


def events_to_labels(events: Sequence[Event], n: int) -> np.ndarray:
    lab = np.zeros(n, dtype=np.int64)
    for ev in events:
        lab[ev.start:ev.end + 1] = 1
    return lab


def segment_iou(a: Event, b: Event) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def match_events(pred: Sequence[Event], truth: Sequence[Event]):
    """Greedy one-to-one matching in descending IoU order: list of (i, j, iou)."""
    pairs = [(segment_iou(p, t), i, j) for i, p in enumerate(pred) for j, t in enumerate(truth)]
    pairs = sorted((x for x in pairs if x[0] > 0), key=lambda x: (-x[0], x[1], x[2]))
    used_p, used_t, out = set(), set(), []
    for iou, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append((i, j, iou))
    return out


def event_f1(pred, truth, taus=DEFAULT_TAUS) -> dict:
    matches = match_events(pred, truth)
    per = {}
    for tau in taus:
        if not pred and not truth:
            per[tau] = 1.0
            continue
        tp = sum(1 for *_, iou in matches if iou >= tau)
        if tp == 0:
            per[tau] = 0.0
            continue
        p, r = tp / len(pred), tp / len(truth)
        per[tau] = 2 * p * r / (p + r)
    return {"per_tau": per, "mean": float(np.mean(list(per.values())))}


def _binned_ece(conf, correct, lo: float, hi: float, bins: int) -> float:
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        return 0.0
    idx = np.clip(np.floor((conf - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    ece = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            ece += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


def ece_frame(probs, labels, bins: int = 10) -> float:
    """Binary ECE with confidence max(p, 1-p), equal-width bins over [0.5, 1]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    pred = (p > 0.5).astype(np.int64)
    return _binned_ece(np.maximum(p, 1 - p), pred == y, 0.5, 1.0, bins)


def ece_event(pred: Sequence[Event], truth: Sequence[Event], tau: float = EVENT_ECE_TAU,
              bins: int = 10):
    """Returns ``(ece, empty)``; an event is correct when matched at IoU >= tau."""
    if not pred:
        return 0.0, True
    if any(e.confidence is None for e in pred):
        raise MetricError("event ECE needs event confidences")
    hit = {i for i, _, iou in match_events(pred, truth) if iou >= tau}
    correct = [i in hit for i in range(len(pred))]
    return _binned_ece([e.confidence for e in pred], correct, 0.0, 1.0, bins), False


def lead_time(flags, truth: Sequence[Event], fps: float) -> dict:
    """Seconds between the start of the flagged run covering each onset and the onset.

    A run never reaches back past the end of the preceding ground-truth event.
    """
    f = np.asarray(flags).astype(bool).ravel()
    leads, missed = [], 0
    prev_end = -1
    for ev in sorted(truth, key=lambda e: e.start):
        s = ev.start
        if s < len(f) and f[s]:
            r = s
            while r - 1 > prev_end and f[r - 1]:
                r -= 1
            leads.append((s - r) / fps)
        else:
            missed += 1
        prev_end = ev.end
    return {"mean": float(np.mean(leads)) if leads else None, "per_onset": leads,
            "misses": missed}


def detection_delay(binary, truth: Sequence[Event], fps: float) -> dict:
    b = np.asarray(binary).astype(bool).ravel()
    delays, missed = [], 0
    for ev in truth:
        hits = np.flatnonzero(b[ev.start:ev.end + 1])
        if hits.size:
            delays.append(hits[0] / fps)
        else:
            missed += 1
    return {"mean": float(np.mean(delays)) if delays else None, "delays": delays,
            "misses": missed}


def pr_curve(scores, labels, calibrated: bool = False) -> dict:
    """Precision/recall at each distinct threshold plus trapezoidal AUC."""
    s, y = _ranked(scores, labels)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise MetricError("PR curve needs both classes")
    tp = np.cumsum(y).astype(np.float64)
    fp = np.cumsum(1 - y).astype(np.float64)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    if calibrated:
        fp = fp * pos / neg
    precision = np.r_[1.0, tp / (tp + fp)]
    recall = np.r_[0.0, tp / pos]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))
    return {"precision": precision, "recall": recall, "thresholds": thresholds, "auc": auc}


def random_baseline_cap(labels, trials: int = 20, seed: int = 0) -> float:
    labels = np.asarray(labels).ravel()
    rng = np.random.default_rng(seed)
    return float(np.mean([frame_cap(rng.random(labels.size), labels) for _ in range(trials)]))


def random_anticipation_cap(labels, delta: int, trials: int = 20, seed: int = 0) -> Optional[float]:
    """Mean over offsets of the random-score cAP on offset-aligned labels."""
    vals = []
    for j in range(1, delta + 1):
        y = np.concatenate([np.asarray(lab)[j:] for lab in labels])
        if 0 < y.sum() < y.size:
            vals.append(random_baseline_cap(y, trials, seed + j))
    return float(np.mean(vals)) if vals else None


# -- report -------------------------------------------------------------

@dataclass
class MetricReport:
    detection_cap: Optional[float]
    anticipation_cap: list
    anticipation_cap_mean: Optional[float]
    frame_ap: Optional[float]
    event_f1: dict
    event_f1_mean: float
    ece_frame: float
    ece_event: float
    ece_event_empty: bool
    lead_time_mean: Optional[float]
    detection_delay_mean: Optional[float]
    detection_misses: int
    lead_time_misses: int
    pr_auc: Optional[float]
    n_frames: int
    positive_fraction: float
    pr_points: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_points: bool = False) -> dict:
        d = asdict(self)
        d["event_f1"] = {str(k): v for k, v in self.event_f1.items()}
        if with_points:
            d["pr_points"] = {k: np.asarray(v).tolist() for k, v in self.pr_points.items()}
        else:
            d.pop("pr_points")
        return d


def evaluate(det_probs, ant_probs, labels, fps: float, delta: int,
             taus=DEFAULT_TAUS, pooled: bool = False) -> MetricReport:
    """Score per-video prediction arrays against per-video frame labels.

    ``det_probs[i]`` has shape ``(N_i,)``, ``ant_probs[i]`` shape ``(N_i, delta)``.
    Event F1 is averaged over videos; event ECE pools events from all videos.
    """
    det_all = np.concatenate(det_probs)
    lab_all = np.concatenate(labels)
    both = 0 < lab_all.sum() < lab_all.size
    det_cap = frame_cap(det_all, lab_all) if both else None
    ap = frame_ap(det_all, lab_all) if lab_all.sum() else None
    ant = anticipation_cap(det_probs, ant_probs, labels, delta, pooled) if both else {
        "per_offset": [None] * delta, "mean": None}
    pr = pr_curve(det_all, lab_all) if both else None

    f1s = []
    leads, lead_miss, delays, det_miss = [], 0, [], 0
    ece_ev_conf, ece_ev_ok = [], []
    for i, (p, lab) in enumerate(zip(det_probs, labels)):
        truth = extract_events(lab)
        pred = extract_events(np.asarray(p) > 0.5, p)
        f1s.append(event_f1(pred, truth, taus)["per_tau"])
        hit = {a for a, _, iou in match_events(pred, truth) if iou >= EVENT_ECE_TAU}
        ece_ev_conf += [e.confidence for e in pred]
        ece_ev_ok += [k in hit for k in range(len(pred))]
        dd = detection_delay(np.asarray(p) > 0.5, truth, fps)
        delays += dd["delays"]
        det_miss += dd["misses"]
        if delta > 0:
            flags = (np.asarray(ant_probs[i]).reshape(len(lab), -1) > 0.5).any(axis=1)
            lt = lead_time(flags, truth, fps)
            leads += lt["per_onset"]
            lead_miss += lt["misses"]
    per_tau = {t: float(np.mean([f[t] for f in f1s])) for t in taus}
    return MetricReport(
        detection_cap=det_cap,
        anticipation_cap=ant["per_offset"],
        anticipation_cap_mean=ant["mean"],
        frame_ap=ap,
        event_f1=per_tau,
        event_f1_mean=float(np.mean(list(per_tau.values()))),
        ece_frame=ece_frame(det_all, lab_all),
        ece_event=_binned_ece(ece_ev_conf, ece_ev_ok, 0.0, 1.0, 10),
        ece_event_empty=not ece_ev_conf,
        lead_time_mean=float(np.mean(leads)) if leads else None,
        detection_delay_mean=float(np.mean(delays)) if delays else None,
        detection_misses=det_miss,
        lead_time_misses=lead_miss,
        pr_auc=pr["auc"] if pr else None,
        n_frames=int(lab_all.size),
        positive_fraction=float(lab_all.mean()),
        pr_points={"precision": pr["precision"], "recall": pr["recall"]} if pr else {},
    )
