"""Command-line entry points.

Subcommands: featurize, synth, train, infer, eval, bench, macs. Global
flags: --config (key = value file), --seed, --threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger("turnkit")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="key = value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="parallelism across files; never within a stream")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turnkit",
                                     description="streaming turn-taking engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="dump per-speaker features for a WAV")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic conversation corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-conversations", type=int, default=20)
    p.add_argument("--no-teacher", action="store_true")

    p = sub.add_parser("train", help="train segmenter, student, and turn model")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output weight container")
    p.add_argument("--eot-steps", type=int, default=800)
    p.add_argument("--segmenter-steps", type=int, default=400)
    p.add_argument("--pretrain-steps", type=int, default=120)
    p.add_argument("--log-dir", type=str, default=None)

    p = sub.add_parser("infer", help="stream a WAV through the pipeline")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="JSON Lines event output")
    p.add_argument("--no-gating", action="store_true")
    p.add_argument("--decisions-csv", type=str, default=None)

    p = sub.add_parser("eval", help="evaluate a trained system on a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--events-csv", type=str, default=None)
    p.add_argument("--segmenter-eer", action="store_true")
    p.add_argument("--eer-csv", type=str, default=None)

    p = sub.add_parser("bench", help="per-frame latency against the 10 ms budget")
    _add_common(p)
    p.add_argument("--weights", type=str, default=None)
    p.add_argument("--seconds", type=float, default=10.0)

    p = sub.add_parser("macs", help="print the analytic complexity report")
    _add_common(p)
    return parser


def _setup(args) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(args.threads, 1))
    np.random.seed(args.seed)
    torch.manual_seed(args.seed)


def _load_config_overrides(args) -> dict:
    from .runtime import parse_config

    if not args.config:
        return {}
    return parse_config(args.config)


def _pipeline_config(overrides: dict, **kwargs):
    from .runtime import PipelineConfig

    valid = {f.name for f in dataclass_fields(PipelineConfig)}
    typed = {}
    for key, value in overrides.items():
        if key not in valid:
            continue
        current = getattr(PipelineConfig, key, None)
        if isinstance(current, bool):
            typed[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, (int,)) and not isinstance(current, bool):
            typed[key] = int(value)
        elif isinstance(current, float):
            typed[key] = float(value)
        else:
            typed[key] = value
    typed.update(kwargs)
    return PipelineConfig(**typed)


def cmd_featurize(args) -> int:
    from .containers import write_feature_dump
    from .features import featurize_channel, load_wav

    audio = load_wav(args.input)
    if audio.ndim == 1:
        audio = np.stack([audio, audio], axis=1)
    mats = [featurize_channel(audio[:, ch]).as_matrix() for ch in (0, 1)]
    data = np.concatenate(mats, axis=1)
    fields = [f"spk{ch}_{name}" for ch in (0, 1)
              for name in [f"mfcc{i}" for i in range(20)] + ["f0", "voicing", "vad"]]
    write_feature_dump(args.out, data, fields)
    print(f"wrote {data.shape[0]} frames x {data.shape[1]} features to {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .datagen import SynthConfig, write_corpus

    cfg = SynthConfig(seed=args.seed, num_conversations=args.num_conversations)
    manifest = write_corpus(args.out, cfg, with_teacher=not args.no_teacher)
    print(f"wrote {len(manifest['ids'])} conversations to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .runtime import build_models, save_system
    from .trainer import (
        SegmenterTrainConfig,
        TrainConfig,
        featurize_corpus,
        fit_eot,
        fit_segmenter,
        pretrain_student,
    )

    log_dir = Path(args.log_dir) if args.log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)
    models = build_models(seed=args.seed)
    seg_cfg = SegmenterTrainConfig(steps=args.segmenter_steps)
    logger.info("training segmenter for %d steps", seg_cfg.steps)
    fit_segmenter(models["segmenter"], seg_cfg, seed=args.seed,
                  log_path=log_dir / "segmenter.jsonl" if log_dir else None)
    logger.info("featurizing corpus %s", args.corpus)
    convs = featurize_corpus(args.corpus, max_workers=args.threads)
    cfg = TrainConfig(total_steps=args.eot_steps,
                      warmup_steps=max(args.eot_steps // 10, 1), seed=args.seed)
    if args.pretrain_steps > 0:
        logger.info("pretraining student for %d steps", args.pretrain_steps)
        pretrain_student(models, convs, cfg, steps=args.pretrain_steps)
    logger.info("training turn model for %d steps", cfg.total_steps)
    fit_eot(models, convs, cfg,
            log_path=log_dir / "eot.jsonl" if log_dir else None)
    save_system(models, args.out)
    print(f"saved weights to {args.out}")
    return 0


def cmd_infer(args) -> int:
    from .runtime import StreamingPipeline, load_system, write_events_jsonl
    from .segmenter import write_decisions_csv

    overrides = _load_config_overrides(args)
    cfg = _pipeline_config(overrides, weights_path=args.weights,
                           gating=not args.no_gating)
    models = load_system(args.weights)
    pipeline = StreamingPipeline(models, cfg)
    events = pipeline.process_file(args.input)
    write_events_jsonl(args.out, events)
    if args.decisions_csv:
        write_decisions_csv(args.decisions_csv, pipeline.track.decisions)
    print(f"wrote {len(events)} frame events to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import load_manifest
    from .evaluate import (
        detect_turn_ends,
        eer_vs_sir,
        final_score_series,
        frame_metrics,
        turn_detection_metrics,
        vote_decode_series,
        write_eer_csv,
        write_events_csv,
        write_metrics_json,
    )
    from .runtime import load_system, segmenter_eer_protocol
    from .trainer import featurize_corpus

    models = load_system(args.weights)
    eot = models["eot"]
    student = models["student"]
    eot.eval(), student.eval()
    convs = featurize_corpus(args.corpus, with_teacher=False,
                             max_workers=args.threads)
    all_pred, all_true, all_events = [], [], []
    fa_scores = []
    for conv in convs:
        base = torch.from_numpy(conv.base)
        with torch.no_grad():
            comp = student(base[..., :20])
            logits = eot.forward_conversation(base, comp, training=False)
        logits = logits.numpy()
        states = vote_decode_series(logits)
        scores = final_score_series(logits)
        all_pred.append(states.reshape(-1))
        all_true.append(conv.labels.reshape(-1))
        for spk in (0, 1):
            turns = [a for a in conv.annotations
                     if a.speaker == spk and a.kind == "turn"]
            if turns:
                events = detect_turn_ends(scores[spk], args.threshold, turns, spk)
                all_events.extend(events)
                fa_scores.append(scores[spk])
    fm = frame_metrics(np.concatenate(all_pred), np.concatenate(all_true))
    payload = {"frame": fm.to_dict(), "threshold": args.threshold}
    if all_events:
        tm = turn_detection_metrics(all_events, np.concatenate(fa_scores),
                                    args.threshold)
        payload["turn"] = tm.to_dict()
    if args.segmenter_eer:
        buckets = segmenter_eer_protocol(models["segmenter"], seed=args.seed)
        points, skipped = eer_vs_sir(buckets)
        payload["eer_vs_sir"] = [p.to_dict() for p in points]
        payload["eer_skipped"] = skipped
        if args.eer_csv:
            write_eer_csv(args.eer_csv, points)
    write_metrics_json(args.out, payload)
    if args.events_csv and all_events:
        write_events_csv(args.events_csv, all_events)
    print(json.dumps({k: payload[k] for k in payload if k != "frame"}, indent=2))
    print(f"macro_f1={fm.macro_f1:.4f} accuracy={fm.accuracy:.4f} "
          f"binary_final_f1={fm.binary_f1:.4f}")
    return 0


def cmd_bench(args) -> int:
    from .runtime import bench_pipeline, build_models, load_system

    models = load_system(args.weights) if args.weights else build_models(seed=args.seed)
    report = bench_pipeline(models, seconds=args.seconds, seed=args.seed)
    print(json.dumps(report, indent=2))
    ok = report["p95_ms"] < report["budget_ms"]
    print(f"p95 {report['p95_ms']:.2f} ms vs {report['budget_ms']:.0f} ms budget: "
          f"{'OK' if ok else 'OVER BUDGET'}")
    return 0 if ok else 1


def cmd_macs(args) -> int:
    from .macs import count_macs

    print(json.dumps(count_macs().to_dict(), indent=2))
    return 0


COMMANDS = {
    "featurize": cmd_featurize,
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "macs": cmd_macs,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup(args)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
