"""Command line entry point: ``struggle-online <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .data import SplitMode, SplitSpec, build_split, intervals_to_frame_labels, \
    read_annotations, read_feature_stream
from .harness import WORKERS_ENV, Corpus, ProtocolResult, ProtocolSpec, emit_report, \
    run_protocol
from .metrics import evaluate
from .models import ModelConfig
from .streaming import StreamEngine, profile, read_track, run_stream, write_track
from .synth import CorpusConfig, generate_corpus
from .train import TrainConfig, load_checkpoint, train

log = logging.getLogger("struggle_online")


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")


def cmd_gen_data(args) -> int:
    cfg = CorpusConfig.load(args.config) if args.config else CorpusConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.signal is not None:
        cfg = cfg.with_signal(args.signal)
    records = generate_corpus(cfg, args.out)
    print(f"{len(records)} videos -> {args.out}")
    return 0


def cmd_train(args) -> int:
    corpus = Corpus(args.corpus)
    s0, _ = corpus.video(corpus.manifest[0].video_id)
    mkw = json.loads(Path(args.model_config).read_text()) if args.model_config else {}
    mkw.update({"variant": args.variant, "d_slow": s0.d_slow, "d_fast": s0.d_fast})
    if args.delta is not None:
        mkw["anticipation_len"] = args.delta
        mkw["near_future_len"] = max(args.delta, mkw.get("near_future_len", 8))
    if args.variant == "LSTR":
        mkw["near_past_len"] = 0
    tkw = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
    if args.epochs is not None:
        tkw["epochs"] = args.epochs
        tkw["warmup_epochs"] = min(tkw.get("warmup_epochs", 3), args.epochs - 1)
    tkw["seed"] = args.seed
    mcfg, tcfg = ModelConfig(**mkw), TrainConfig(**tkw)
    mode = SplitMode.WITHIN_ACTIVITY if args.activity else SplitMode.COMBINED_ALL
    tr, va = build_split(corpus.manifest, SplitSpec(mode, activity=args.activity))
    _, rows = train(mcfg, tcfg, [corpus.video(r.video_id) for r in tr], out_path=args.out,
                    val=[corpus.video(r.video_id) for r in va] if args.validate else None)
    print(f"trained {mcfg.variant.value} on {len(tr)} videos -> {args.out}")
    return 0


def cmd_stream(args) -> int:
    model = load_checkpoint(args.model)
    stream = read_feature_stream(args.features)
    track = run_stream(lambda: StreamEngine(model), stream)
    write_track(track, args.out, with_latency=not args.no_latency)
    return 0


def cmd_eval(args) -> int:
    track = read_track(args.track)
    ann = read_annotations(args.labels)
    if track.video_id not in ann:
        print(f"no annotations for {track.video_id}", file=sys.stderr)
        return 2
    n = len(track.frames)
    labels = intervals_to_frame_labels(ann[track.video_id], args.fps, n).labels
    ant = track.anticipation
    rep = evaluate([track.detection], [ant], [labels], args.fps, ant.shape[1])
    _dump({"video_id": track.video_id, **rep.to_dict()}, args.report)
    if rep.pr_points:
        with open(Path(args.report).with_suffix(".pr.csv"), "w") as fh:
            fh.write("recall,precision\n")
            for r, p in zip(rep.pr_points["recall"], rep.pr_points["precision"]):
                fh.write(f"{r!r},{p!r}\n")
    return 0


def cmd_protocol(args) -> int:
    spec = ProtocolSpec.load(args.config, run_dir=args.run_dir, corpus_dir=args.corpus)
    res = run_protocol(spec)
    out = Path(spec.run_dir) / "report"
    emit_report(res, out)
    _dump({"spec": spec.to_dict(), "report_dir": str(out)}, Path(spec.run_dir) / "run_manifest.json")
    if res.failed:
        for c in res.failed:
            print(f"FAILED {c['train']} -> {c['eval']} seed {c['seed']}: {c['error']}",
                  file=sys.stderr)
        return 1
    return 0


def cmd_profile(args) -> int:
    model = load_checkpoint(args.model)
    stream = read_feature_stream(args.features)
    rep = profile(StreamEngine(model), stream, args.warmup)
    _dump(rep.to_dict(), args.out)
    print(f"{rep.mean_ms:.3f} ms/step, {rep.steps_per_second:.1f} steps/s, "
          f"{rep.param_count} params")
    return 0


def cmd_report(args) -> int:
    doc = json.loads(Path(args.result).read_text())
    res = ProtocolResult(doc["protocol"], doc["cells"], doc["random"], doc["matrices"],
                         doc["provenance"])
    emit_report(res, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="struggle-online",
                                description="Online struggle detection and anticipation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--signal", type=float, help="override signal strength for all activities")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model on a corpus split")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["LSTR", "CMERT"], default="CMERT")
    t.add_argument("--activity", help="within-activity split (default: all activities)")
    t.add_argument("--delta", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--validate", action="store_true", help="log validation cAP per epoch")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stream", help="causal frame-by-frame inference over a feature file")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-latency", action="store_true", help="omit the timing column")
    s.set_defaults(func=cmd_stream)

    e = sub.add_parser("eval", help="score a prediction track")
    e.add_argument("--track", required=True)
    e.add_argument("--labels", required=True, help="annotations.json")
    e.add_argument("--report", required=True)
    e.add_argument("--fps", type=float, default=3.125)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("protocol", help=f"run an experiment grid (workers: ${WORKERS_ENV})")
    r.add_argument("--config", required=True)
    r.add_argument("--run-dir")
    r.add_argument("--corpus")
    r.set_defaults(func=cmd_protocol)

    f = sub.add_parser("profile", help="per-step latency of the streaming engine")
    f.add_argument("--model", required=True)
    f.add_argument("--features", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--warmup", type=int, default=10)
    f.set_defaults(func=cmd_profile)

    o = sub.add_parser("report", help="re-emit tables from a saved protocol result")
    o.add_argument("--result", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
