"""Experiment protocols over a generated corpus, with checkpoint caching."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (ACTIVITIES, SplitMode, SplitSpec, assert_disjoint, build_split,
                   intervals_to_frame_labels, read_annotations, read_feature_stream,
                   read_manifest)
from .metrics import evaluate, random_anticipation_cap, random_baseline_cap
from .models import ModelConfig, Variant
from .streaming import predict_video
from .synth import corpus_hash
from .train import TrainConfig, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger(__name__)

WORKERS_ENV = "OSD_WORKERS"


class Protocol(str, Enum):
    WITHIN_ACTIVITY = "WithinActivity"
    COMBINED_ALL = "CombinedAll"
    ACTIVITY_LEVEL_GEN = "ActivityLevelGen"
    TASK_LEVEL_GEN = "TaskLevelGen"
    CROSS_ACTIVITY_ZERO_SHOT = "CrossActivityZeroShot"
    ATTEMPT_MATRIX = "AttemptMatrix"
    HORIZON_ABLATION = "HorizonAblation"


@dataclass
class ProtocolSpec:
    protocol: Protocol
    corpus_dir: str
    run_dir: str
    variants: tuple = ("CMERT",)
    deltas: tuple = (6, 12, 18, 24)
    seeds: tuple = (0, 1, 2)
    activities: Optional[tuple] = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    random_trials: int = 20
    macro_average: bool = False

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        self.variants = tuple(self.variants)
        self.deltas = tuple(int(d) for d in self.deltas)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.activities is not None:
            self.activities = tuple(self.activities)
        if self.protocol is Protocol.HORIZON_ABLATION and not self.deltas:
            raise ValueError("HorizonAblation needs a non-empty delta list")
        if not self.seeds or not self.variants:
            raise ValueError("need at least one seed and one variant")

    @classmethod
    def load(cls, path, **overrides) -> "ProtocolSpec":
        d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.value
        return d


@dataclass
class ProtocolResult:
    protocol: str
    cells: list = field(default_factory=list)
    random: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.get("error")]


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()


class Corpus:
    """Manifest, annotations and lazily loaded (stream, labels) pairs."""

    def __init__(self, corpus_dir):
        self.dir = Path(corpus_dir)
        self.manifest = read_manifest(self.dir / "manifest.json")
        self.annotations = read_annotations(self.dir / "annotations.json")
        self.hash = corpus_hash(self.dir)
        self._cache: dict = {}

    def video(self, video_id: str):
        if video_id not in self._cache:
            s = read_feature_stream(self.dir / "features" / f"{video_id}.osdf", video_id)
            lab = intervals_to_frame_labels(self.annotations[video_id], s.feature_fps,
                                            s.n_frames).labels
            self._cache[video_id] = (s, lab)
        return self._cache[video_id]

    def activities(self) -> list:
        present = {r.activity for r in self.manifest}
        return [a for a in ACTIVITIES if a in present]

    def tasks(self, activity: str) -> list:
        return sorted({r.task_id for r in self.manifest if r.activity == activity})

    def attempts(self, activity: str) -> list:
        return sorted({r.attempt for r in self.manifest if r.activity == activity})


class Runner:
    def __init__(self, spec: ProtocolSpec):
        self.spec = spec
        self.corpus = Corpus(spec.corpus_dir)
        self.run_dir = Path(spec.run_dir)
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self._preds: dict = {}

    # model/training configs ------------------------------------------
    def model_config(self, variant: str, delta: Optional[int] = None) -> ModelConfig:
        s, _ = self.corpus.video(self.corpus.manifest[0].video_id)
        kw = {"d_slow": s.d_slow, "d_fast": s.d_fast, **self.spec.model, "variant": variant}
        if delta is not None:
            kw["anticipation_len"] = delta
            kw["near_future_len"] = max(delta, kw.get("near_future_len", 8))
        if Variant(variant) is Variant.LSTR:
            kw.pop("near_past_len", None)
            kw["near_past_len"] = 0
        return ModelConfig(**kw)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.spec.train, "seed": seed})

    def checkpoint(self, mcfg: ModelConfig, tcfg: TrainConfig, train_ids: list) -> str:
        key = _sha(mcfg.to_dict(), tcfg.to_dict(), sorted(train_ids), self.corpus.hash)[:24]
        path = self.run_dir / "checkpoints" / f"{key}.ckpt"
        if not path.exists():
            data = [self.corpus.video(v) for v in train_ids]
            model, rows = train(mcfg, tcfg, data)
            write_log(rows, path.with_suffix(".log.csv"))
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            save_checkpoint(model, tmp, tcfg)
            tmp.replace(path)
        return key

    def predictions(self, key: str, video_id: str):
        if (key, video_id) not in self._preds:
            model = load_checkpoint(self.run_dir / "checkpoints" / f"{key}.ckpt")
            s, _ = self.corpus.video(video_id)
            self._preds[(key, video_id)] = predict_video(model, s.frames)
        return self._preds[(key, video_id)]

    # scoring ------------------------------------------------------------
    def score(self, key: str, records, delta: int):
        det, ant, labs = [], [], []
        for r in records:
            d, a = self.predictions(key, r.video_id)
            det.append(d)
            ant.append(a)
            labs.append(self.corpus.video(r.video_id)[1])
        fps = self.corpus.video(records[0].video_id)[0].feature_fps
        return evaluate(det, ant, labs, fps, delta)

    def random_row(self, records, delta: int) -> dict:
        labs = [self.corpus.video(r.video_id)[1] for r in records]
        y = np.concatenate(labs)
        trials, seed = self.spec.random_trials, 0
        det = random_baseline_cap(y, trials, seed) if 0 < y.sum() < y.size else None
        return {"det_cap": det, "ant_avg": random_anticipation_cap(labs, delta, trials, seed)}

    # one grid cell --------------------------------------------------------
    def cell(self, split: SplitSpec, variant: str, seed: int, train_sel: str,
             eval_groups: dict, delta: Optional[int] = None) -> list:
        """Train on ``split``'s train side; score each named group of val records."""
        if delta is None:
            delta = self.model_config(variant).anticipation_len
        base = {"train": train_sel, "variant": variant, "seed": seed, "delta": delta}
        try:
            train_recs, val_recs = build_split(self.corpus.manifest, split)
            assert_disjoint(train_recs, val_recs, participant=split.participant_disjoint)
            mcfg = self.model_config(variant, delta)
            tcfg = self.train_config(seed)
            key = self.checkpoint(mcfg, tcfg, [r.video_id for r in train_recs])
        except Exception as exc:  # recorded, grid continues
            log.exception("cell %s failed", base)
            return [{**base, "eval": name, "error": f"{type(exc).__name__}: {exc}"}
                    for name in eval_groups]
        out = []
        for name, pick in eval_groups.items():
            recs = [r for r in val_recs if pick(r)]
            row = {**base, "eval": name, "checkpoint": key,
                   "config_hash": _sha(mcfg.to_dict(), tcfg.to_dict())[:16],
                   "corpus_hash": self.corpus.hash[:16], "n_val": len(recs)}
            try:
                if not recs:
                    raise ValueError("no validation videos for this selector")
                rep = self.score(key, recs, mcfg.anticipation_len)
                row["report"] = rep.to_dict(with_points=True)
            except Exception as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            out.append(row)
        return out

    # protocols -----------------------------------------------------------
    def jobs(self):
        """Yield ``(split, variant, seed, train_sel, eval_groups, delta)`` tuples."""
        P = Protocol
        p = self.spec.protocol
        acts = list(self.spec.activities or self.corpus.activities())
        every = {"all": lambda r: True}
        for variant in self.spec.variants:
            for seed in self.spec.seeds:
                if p is P.WITHIN_ACTIVITY:
                    for a in acts:
                        yield SplitSpec(SplitMode.WITHIN_ACTIVITY, activity=a), variant, seed, \
                            a, {a: lambda r: True}, None
                elif p is P.COMBINED_ALL:
                    groups = {"Overall": lambda r: True}
                    groups.update({a: (lambda r, a=a: r.activity == a) for a in acts})
                    yield SplitSpec(SplitMode.COMBINED_ALL), variant, seed, "Combined", groups, None
                elif p is P.ACTIVITY_LEVEL_GEN:
                    for a in acts:
                        yield SplitSpec(SplitMode.LEAVE_ONE_ACTIVITY_OUT, activity=a), variant, \
                            seed, f"not-{a}", {a: lambda r: True}, None
                elif p is P.TASK_LEVEL_GEN:
                    for a in acts:
                        for t in self.corpus.tasks(a):
                            yield SplitSpec(SplitMode.LEAVE_ONE_TASK_OUT, activity=a, task_id=t), \
                                variant, seed, f"{a}-not-T{t}", {f"{a}-T{t}": lambda r: True}, None
                elif p is P.CROSS_ACTIVITY_ZERO_SHOT:
                    for a in acts:
                        for b in acts:
                            yield SplitSpec(SplitMode.CROSS_ACTIVITY_ZERO_SHOT, activity=a,
                                            eval_activity=b), variant, seed, a, {b: every["all"]}, None
                elif p is P.ATTEMPT_MATRIX:
                    for a in acts:
                        attempts = self.corpus.attempts(a)
                        for i in attempts:
                            groups = {f"{a}-A{j}": (lambda r, j=j: r.attempt == j)
                                      for j in attempts}
                            yield SplitSpec(SplitMode.ATTEMPT_FILTER, activity=a,
                                            train_attempts=(i,)), variant, seed, f"{a}-A{i}", \
                                groups, None
                elif p is P.HORIZON_ABLATION:
                    for a in acts:
                        for d in self.spec.deltas:
                            yield SplitSpec(SplitMode.WITHIN_ACTIVITY, activity=a), variant, seed, \
                                a, {a: lambda r: True}, d

    def random_rows(self) -> dict:
        """Random-baseline cAPs for every evaluation group, keyed ``eval|delta``."""
        out = {}
        for split, variant, _s, _t, groups, delta in self.jobs():
            try:
                _, val = build_split(self.corpus.manifest, split)
            except Exception:
                continue
            d = delta if delta is not None else self.model_config(variant).anticipation_len
            for name, pick in groups.items():
                k = f"{name}|{d}"
                recs = [r for r in val if pick(r)]
                if k not in out and recs:
                    out[k] = self.random_row(recs, d)
        return out

    def run(self) -> ProtocolResult:
        jobs = list(self.jobs())
        workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
        if workers > 1:
            # train distinct checkpoints concurrently, then score serially
            todo = {}
            for split, variant, seed, _sel, _groups, delta in jobs:
                try:
                    train_recs, _ = build_split(self.corpus.manifest, split)
                except Exception:
                    continue
                ids = tuple(sorted(r.video_id for r in train_recs))
                todo.setdefault((variant, seed, delta, ids), None)
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(lambda k: self._warm(*k), todo))
        cells = []
        for job in jobs:
            cells += self.cell(*job)
        if self.spec.macro_average and self.spec.protocol is Protocol.COMBINED_ALL:
            cells += macro_cells(cells)
        res = ProtocolResult(self.spec.protocol.value, cells, self.random_rows())
        res.matrices = build_matrices(res)
        res.provenance = {
            # paths are excluded: the corpus is identified by its content hash
            "spec_hash": _sha({k: v for k, v in self.spec.to_dict().items()
                               if k not in ("corpus_dir", "run_dir")})[:16],
            "corpus_hash": self.corpus.hash,
            "seeds": list(self.spec.seeds),
            "package_version": __version__,
        }
        return res

    def _warm(self, variant, seed, delta, train_ids):
        try:
            self.checkpoint(self.model_config(variant, delta), self.train_config(seed),
                            list(train_ids))
        except Exception:
            log.exception("pre-training failed; the cell will retry and record the error")


def macro_cells(cells: list) -> list:
    """Unweighted mean of the per-activity rows, one ``Overall-macro`` cell per run."""
    out = []
    runs: dict = {}
    for c in cells:
        if c["eval"] != "Overall":
            runs.setdefault((c["train"], c["variant"], c["seed"], c["delta"]), []).append(c)
    for (tr, v, seed, delta), cs in runs.items():
        row = {"train": tr, "eval": "Overall-macro", "variant": v, "seed": seed, "delta": delta}
        if any(c.get("error") for c in cs):
            row["error"] = "an activity cell failed"
        else:
            row["report"] = {k: _mean_std([c["report"][k] for c in cs])[0]
                             for k in ("detection_cap", "anticipation_cap_mean")}
        out.append(row)
    return out


def run_protocol(spec: ProtocolSpec) -> ProtocolResult:
    return Runner(spec).run()


# -- summaries ----------------------------------------------------------------

def _metric(cell, key):
    rep = cell.get("report")
    return None if rep is None else rep.get(key)


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def build_matrices(res: ProtocolResult) -> dict:
    """Square cAP matrices (train selector x eval selector) averaged over seeds."""
    if res.protocol not in (Protocol.CROSS_ACTIVITY_ZERO_SHOT.value,
                            Protocol.ATTEMPT_MATRIX.value):
        return {}
    out = {}
    variants = sorted({c["variant"] for c in res.cells})
    for v in variants:
        cells = [c for c in res.cells if c["variant"] == v]
        if res.protocol == Protocol.ATTEMPT_MATRIX.value:
            groups = {}
            for c in cells:
                groups.setdefault(c["train"].rsplit("-A", 1)[0], []).append(c)
        else:
            groups = {"activities": cells}
        for name, cs in groups.items():
            rows = sorted({c["train"] for c in cs}, key=_selector_order)
            cols = sorted({c["eval"] for c in cs}, key=_selector_order)
            for metric, key in (("det", "detection_cap"), ("ant", "anticipation_cap_mean")):
                grid = []
                for r in rows:
                    line = []
                    for col in cols:
                        vals = [_metric(c, key) for c in cs if c["train"] == r and c["eval"] == col]
                        line.append(_mean_std(vals)[0])
                    grid.append(line)
                out[f"{v}_{name}_{metric}"] = {"rows": rows, "cols": cols, "values": grid}
    return out


def _selector_order(sel: str):
    for i, a in enumerate(ACTIVITIES):
        if sel.startswith(a):
            return (i, sel)
    return (len(ACTIVITIES), sel)


def summary_rows(res: ProtocolResult) -> list[dict]:
    """One row per (train, eval, variant, delta) with seed mean/std and random baseline."""
    keyed: dict = {}
    for c in res.cells:
        keyed.setdefault((c["train"], c["eval"], c["variant"], c["delta"]), []).append(c)
    rows = []
    for (tr, ev, v, d), cs in keyed.items():
        det = _mean_std([_metric(c, "detection_cap") for c in cs])
        ant = _mean_std([_metric(c, "anticipation_cap_mean") for c in cs])
        rnd = res.random.get(f"{ev}|{d}", {})
        rows.append({
            "train": tr, "eval": ev, "variant": v, "delta": d,
            "ant_avg": ant[0], "ant_std": ant[1], "det_cap": det[0], "det_std": det[1],
            "random_ant_avg": rnd.get("ant_avg"), "random_det_cap": rnd.get("det_cap"),
            "failed": sum(1 for c in cs if c.get("error")),
        })
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def emit_report(res: ProtocolResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out / "pr").mkdir(parents=True, exist_ok=True)
    written = []

    rows = summary_rows(res)
    path = out / f"{res.protocol}_summary.csv"
    cols = ["train", "eval", "variant", "delta", "ant_avg", "ant_std", "det_cap", "det_std",
            "random_ant_avg", "random_det_cap", "failed"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    written.append(path)

    for name, m in res.matrices.items():
        path = out / "heatmaps" / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train\\eval"] + m["cols"])
            for r, vals in zip(m["rows"], m["values"]):
                w.writerow([r] + [_fmt(v) for v in vals])
        written.append(path)

    for c in res.cells:
        pts = (c.get("report") or {}).get("pr_points") or {}
        if not pts:
            continue
        tag = f"{c['variant']}_{c['train']}_{c['eval']}_s{c['seed']}_d{c['delta']}"
        path = out / "pr" / f"{tag}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["recall", "precision"])
            for r, p in zip(pts["recall"], pts["precision"]):
                w.writerow([repr(r), repr(p)])
        written.append(path)

    cells = []
    for c in res.cells:
        c = dict(c)
        if c.get("report"):
            c["report"] = {k: v for k, v in c["report"].items() if k != "pr_points"}
        cells.append(c)
    doc = {"protocol": res.protocol, "provenance": res.provenance, "random": res.random,
           "matrices": res.matrices, "cells": cells, "failed": len(res.failed)}
    path = out / f"{res.protocol}_result.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    written.append(path)
    return written
