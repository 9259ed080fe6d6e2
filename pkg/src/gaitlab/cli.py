"""Unified command-line entry point.

Exit codes: 0 success, 1 domain error (error name on stderr), 2 usage error.
Every run prints its resolved configuration to stderr; machine-readable
output is behind --json where it applies.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import __version__
from .core import (
    ChannelTable,
    Taxonomy,
    load_manifest,
    parse_skeleton_sequence,
    sample_frames,
)
from .datasets import (
    DEFAULT_SYNTH_SPEC,
    generate_synthetic_cohort,
    load_split,
    load_synth_spec,
    store_split,
    subject_disjoint_split,
    verify_split,
)
from .errors import GaitLabError
from .gait import compute_metrics, detect_gait_events, render_rationale
from .review import load_study_dir, study_summary, summary_to_json
from .server import StudyServer
from .stats import ConfusionMatrix, accuracy, macro_f1, per_class_f1
from .ted import TedConfig
from .tokenizer import TokenizerConfig, assemble_prompt, render_sequence
from .train import (
    PipelineConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_eval_report,
    save_checkpoint,
    train,
)
from .fusion import BackboneConfig, VisualStubConfig


def _print_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(f"gaitlab {args.command} config: {json.dumps(resolved, sort_keys=True, default=str)}", file=sys.stderr)


def _read_seq(path: str):
    with open(path, "rb") as fh:
        return parse_skeleton_sequence(fh)


def _load_channel_config(path: str):
    """Channel subset config: one 'segment,channel' pair per line; # comments."""
    subset = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            seg, chan = [p.strip() for p in ln.split(",", 1)]
            subset.append((seg, chan))
    return tuple(subset)


def _cmd_tokenize(args) -> int:
    seq = _read_seq(args.seq)
    cfg = TokenizerConfig(max_tokens=args.max_tokens, decimals=args.decimals)
    if args.channels:
        cfg = replace(cfg, channel_subset=_load_channel_config(args.channels))
    sampled = sample_frames(seq, args.frames)
    bio = render_sequence(sampled, ChannelTable.default(), cfg)
    prompt = assemble_prompt(bio, Taxonomy(), cfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(prompt)
        fh.write("\n")
    print(f"wrote {args.out}: {bio.token_count} biomechanical tokens, {len(bio.lines)} frame lines")
    return 0


def _metrics_dict(m) -> dict:
    return {
        "cadence": m.cadence,
        "step_time_left": m.step_time_left,
        "step_time_right": m.step_time_right,
        "double_support_pct": m.double_support_pct,
        "double_support_s": m.double_support_s,
        "swing_pct_left": m.swing_pct_left,
        "swing_pct_right": m.swing_pct_right,
        "asymmetry_index": m.asymmetry_index,
        "n_steps": m.n_steps,
        "toe_offs_left": m.toe_offs_left,
        "toe_offs_right": m.toe_offs_right,
    }


def _cmd_metrics(args) -> int:
    seq = _read_seq(args.seq)
    events = detect_gait_events(seq)
    m = compute_metrics(events, seq.fps)
    payload = _metrics_dict(m)
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for k, v in payload.items():
            print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return 0


def _cmd_report(args) -> int:
    if args.seq and args.predicted_class:
        seq = _read_seq(args.seq)
        events = detect_gait_events(seq)
        m = compute_metrics(events, seq.fps)
        text = render_rationale(m, args.predicted_class, Taxonomy())
        if args.json:
            print(json.dumps({"class": args.predicted_class, "rationale": text, "metrics": _metrics_dict(m)}))
        else:
            print(text)
        return 0
    if args.predictions and args.truth:
        taxonomy = Taxonomy()
        with open(args.truth, "rb") as fh:
            manifest = load_manifest(fh)
        labels = {r.clip_id: r.label for r in manifest.records}
        with open(args.predictions, "r", encoding="utf-8") as fh:
            report = load_eval_report(fh, taxonomy)
        truth = [labels[e.clip_id] for e in report.entries]
        preds = [e.predicted for e in report.entries]
        cm = ConfusionMatrix.from_predictions(truth, preds, taxonomy)
        acc, mf1, per = accuracy(cm), macro_f1(cm), per_class_f1(cm)
        if args.json:
            print(
                json.dumps(
                    {
                        "accuracy_pct": acc,
                        "macro_f1_pct": mf1,
                        "per_class_f1_pct": dict(zip(taxonomy.classes, per)),
                        "n": cm.total,
                    },
                    sort_keys=True,
                )
            )
        else:
            print(f"clips evaluated: {cm.total}")
            print(f"accuracy: {acc:.1f}%")
            print(f"macro F1: {mf1:.1f}%")
            print("per-class F1:")
            for name, f1 in zip(taxonomy.classes, per):
                print(f"  {name}: {f1:.1f}%")
        return 0
    print("report needs either --seq with --class, or --predictions with --truth", file=sys.stderr)
    return 2


def _cmd_split(args) -> int:
    with open(args.manifest, "rb") as fh:
        manifest = load_manifest(fh)
    split = subject_disjoint_split(manifest, args.test_frac, args.seed)
    report = verify_split(split, manifest)
    with open(args.out, "wb") as fh:
        fh.write(store_split(split))
    summary = {
        "train_clips": len(split.train),
        "test_clips": len(split.test),
        "train_subjects": len(split.train_subjects),
        "test_subjects": len(split.test_subjects),
        "verified": report.passed,
    }
    print(json.dumps(summary, sort_keys=True) if args.json else
          f"wrote {args.out}: {summary['train_clips']} train / {summary['test_clips']} test clips, "
          f"{summary['train_subjects']}/{summary['test_subjects']} subjects, verified={report.passed}")
    return 0


def _cmd_synth(args) -> int:
    if args.spec:
        with open(args.spec, "rb") as fh:
            spec = load_synth_spec(fh)
    else:
        spec = DEFAULT_SYNTH_SPEC
    manifest, truths = generate_synthetic_cohort(spec, args.seed, args.out_dir)
    msg = {"clips": len(manifest), "out_dir": args.out_dir, "sidecar_records": len(truths)}
    print(json.dumps(msg, sort_keys=True) if args.json else
          f"generated {msg['clips']} clips under {args.out_dir}")
    return 0


def _pipeline_from_args(args) -> PipelineConfig:
    ted = TedConfig(D=args.dim)
    return PipelineConfig(
        frames=args.frames,
        ted=ted,
        visual=VisualStubConfig(D=args.dim),
        backbone=BackboneConfig(D=args.dim),
    )


def _cmd_train(args) -> int:
    with open(args.manifest, "rb") as fh:
        manifest = load_manifest(fh)
    with open(args.split, "rb") as fh:
        split = load_split(fh)
    report = verify_split(split, manifest)
    if not report.passed:
        print("split failed verification:", "; ".join(report.issues), file=sys.stderr)
        return 1
    taxonomy = Taxonomy()
    pipeline = _pipeline_from_args(args)
    cfg = TrainConfig(seed=args.seed, ablation=args.ablation, epochs=args.epochs)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(
        manifest,
        split.train,
        taxonomy,
        pipeline,
        cfg,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
        resume=resume,
    )
    save_checkpoint(ckpt, args.out)
    msg = {
        "out": args.out,
        "epochs": ckpt.epoch,
        "final_loss": ckpt.loss_history[-1] if ckpt.loss_history else None,
        "ablation": cfg.ablation,
    }
    print(json.dumps(msg, sort_keys=True) if args.json else
          f"wrote {args.out}: {ckpt.epoch} epochs, final loss {msg['final_loss']:.4f}, ablation={cfg.ablation}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    with open(args.manifest, "rb") as fh:
        manifest = load_manifest(fh)
    with open(args.split, "rb") as fh:
        split = load_split(fh)
    report = evaluate(
        ckpt,
        manifest,
        split.test,
        base_dir=os.path.dirname(os.path.abspath(args.manifest)),
    )
    with open(args.report, "wb") as fh:
        fh.write(report.to_bytes())
    truth = [e.true_label for e in report.entries]
    preds = [e.predicted for e in report.entries]
    cm = ConfusionMatrix.from_predictions(truth, preds, ckpt.taxonomy)
    msg = {"report": args.report, "clips": cm.total, "accuracy_pct": accuracy(cm), "macro_f1_pct": macro_f1(cm)}
    print(json.dumps(msg, sort_keys=True) if args.json else
          f"wrote {args.report}: accuracy {msg['accuracy_pct']:.1f}%, macro F1 {msg['macro_f1_pct']:.1f}% over {cm.total} clips")
    return 0


def _cmd_serve(args) -> int:
    study, store = load_study_dir(args.study)
    server = StudyServer(
        study,
        store,
        host=args.host,
        port=args.port,
        ui_dir=args.ui,
        preview_dir=args.study,
    )
    print(f"serving study with {len(study.cases)} cases for {len(study.raters)} raters "
          f"on http://{args.host}:{server.port}/", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _cmd_study_summary(args) -> int:
    study, store = load_study_dir(args.study)
    s = study_summary(study, store)
    payload = summary_to_json(s, study, anonymize=False)
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(f"ratings: {s.rated}/{s.total_cases} cases")
        for model in study.models:
            dims = payload["means"].get(model)
            if dims:
                rendered = ", ".join(f"{d}={v:.2f}" for d, v in dims.items())
            else:
                rendered = "no ratings"
            print(f"  {model}: {rendered}; preferred {payload['preference_counts'][model]}x")
        print(f"preferred model: {s.preferred_model} "
              f"({s.preference_share:.1f}% of cases, p={s.p_value:.3g}, one-sided binomial)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gaitlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="render a skeleton sequence into prompt text")
    p.add_argument("--seq", required=True)
    p.add_argument("--channels", help="channel subset config file (segment,channel per line)")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--decimals", type=int, default=1)
    p.add_argument("--max-tokens", type=int, default=1024, dest="max_tokens")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("metrics", help="gait events and timing metrics for one clip")
    p.add_argument("--seq", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("report", help="rationale text for a clip, or a metrics table for predictions")
    p.add_argument("--seq")
    p.add_argument("--class", dest="predicted_class")
    p.add_argument("--predictions")
    p.add_argument("--truth", help="manifest file supplying true labels")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("split", help="subject-disjoint train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-frac", type=float, default=0.2, dest="test_frac")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic gait cohort")
    p.add_argument("--spec", help="SynthSpec JSON file (defaults to the built-in 8-class spec)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the decoder and head on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--ablation", choices=["full", "no_ted", "no_bio", "neither"], default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the split's test side")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="serve the blinded review study")
    p.add_argument("--study", required=True, help="directory with study.json (+ ratings.jsonl)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8350)
    p.add_argument("--ui", help="directory of built UI assets to serve at /")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("study-summary", help="aggregate a study's ratings (de-blinded)")
    p.add_argument("--study", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_study_summary)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _print_config(args)
    try:
        return args.func(args)
    except GaitLabError as e:
        print(f"{e.name}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"FileNotFound: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
