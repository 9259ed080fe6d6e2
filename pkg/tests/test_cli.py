from __future__ import annotations

import json
from dataclasses import replace

import pytest

from gaitlab.cli import dispatch
from gaitlab.core import load_manifest
from gaitlab.datasets import (
    DEFAULT_ARCHETYPES,
    DEFAULT_SYNTH_SPEC,
    load_split,
    store_synth_spec,
    verify_split,
)
from gaitlab.review import ReviewCase, store_study_file
from gaitlab.stats import LIKERT_DIMENSIONS


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small end-to-end workspace: cohort, split, and file paths."""
    root = tmp_path_factory.mktemp("cli")
    spec = replace(
        DEFAULT_SYNTH_SPEC,
        archetypes=tuple(a for a in DEFAULT_ARCHETYPES if a.label in ("Normal", "Parkinson's")),
        subjects_per_class=4,
        clips_per_subject=2,
        frames_per_clip=150,
    )
    spec_path = root / "spec.json"
    spec_path.write_bytes(store_synth_spec(spec))
    out_dir = root / "cohort"
    rc = dispatch(["synth", "--spec", str(spec_path), "--seed", "4", "--out-dir", str(out_dir)])
    assert rc == 0
    return root, out_dir


def test_synth_then_split_verifies(workspace, capsys):
    root, out_dir = workspace
    split_path = root / "split.json"
    rc = dispatch(
        ["split", "--manifest", str(out_dir / "manifest.jsonl"), "--test-frac", "0.25",
         "--seed", "1", "--out", str(split_path), "--json"]
    )
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()[-1]
    summary = json.loads(out)
    assert summary["verified"] is True
    with open(out_dir / "manifest.jsonl", "rb") as fh:
        manifest = load_manifest(fh)
    split = load_split(split_path.read_bytes())
    assert verify_split(split, manifest).passed


def test_split_deterministic_bytes(workspace, tmp_path):
    root, out_dir = workspace
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        rc = dispatch(
            ["split", "--manifest", str(out_dir / "manifest.jsonl"), "--test-frac", "0.25",
             "--seed", "9", "--out", str(path)]
        )
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()


def test_tokenize_emits_prompt(workspace, tmp_path):
    root, out_dir = workspace
    with open(out_dir / "manifest.jsonl", "rb") as fh:
        manifest = load_manifest(fh)
    seq_path = out_dir / manifest.records[0].path
    out = tmp_path / "prompt.txt"
    rc = dispatch(
        ["tokenize", "--seq", str(seq_path), "--frames", "8", "--max-tokens", "1024",
         "--out", str(out)]
    )
    assert rc == 0
    text = out.read_text()
    assert "Frame 0:" in text and "[Pelvis]" in text
    assert len(text.split()) <= 1024 + 60  # instruction block plus capped frame text


def test_metrics_json(workspace, capsys):
    root, out_dir = workspace
    with open(out_dir / "manifest.jsonl", "rb") as fh:
        manifest = load_manifest(fh)
    seq_path = out_dir / manifest.records[0].path
    rc = dispatch(["metrics", "--seq", str(seq_path), "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["cadence"] > 0
    assert 0 <= payload["swing_pct_left"] <= 100


def test_report_rationale_mode(workspace, capsys):
    root, out_dir = workspace
    with open(out_dir / "manifest.jsonl", "rb") as fh:
        manifest = load_manifest(fh)
    seq_path = out_dir / manifest.records[0].path
    rc = dispatch(["report", "--seq", str(seq_path), "--class", "Normal"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Predicted gait class: Normal." in out
    assert "steps per minute" in out


def test_train_eval_report_roundtrip(workspace, tmp_path, capsys):
    root, out_dir = workspace
    split_path = root / "split2.json"
    assert dispatch(
        ["split", "--manifest", str(out_dir / "manifest.jsonl"), "--test-frac", "0.25",
         "--seed", "2", "--out", str(split_path)]
    ) == 0
    # tiny taxonomy is not the default one, so train via the API-level test;
    # here just exercise the CLI contract with the full cohort is too slow --
    # use a 2-epoch run on the small 2-class cohort with default taxonomy
    ckpt = tmp_path / "model.ckpt"
    rc = dispatch(
        ["train", "--manifest", str(out_dir / "manifest.jsonl"), "--split", str(split_path),
         "--ablation", "full", "--seed", "0", "--epochs", "2", "--dim", "32",
         "--frames", "10", "--out", str(ckpt), "--json"]
    )
    assert rc == 1  # default 8-class taxonomy has empty classes on this cohort
    err = capsys.readouterr().err
    assert "EmptyClass" in err


def test_full_cli_pipeline_with_all_classes(tmp_path, capsys):
    spec = replace(
        DEFAULT_SYNTH_SPEC, subjects_per_class=2, clips_per_subject=2, frames_per_clip=120,
    )
    spec_path = tmp_path / "spec.json"
    spec_path.write_bytes(store_synth_spec(spec))
    out_dir = tmp_path / "cohort"
    assert dispatch(["synth", "--spec", str(spec_path), "--seed", "6", "--out-dir", str(out_dir)]) == 0
    split_path = tmp_path / "split.json"
    assert dispatch(
        ["split", "--manifest", str(out_dir / "manifest.jsonl"), "--test-frac", "0.3",
         "--seed", "5", "--out", str(split_path)]
    ) == 0
    ckpt = tmp_path / "model.ckpt"
    rc = dispatch(
        ["train", "--manifest", str(out_dir / "manifest.jsonl"), "--split", str(split_path),
         "--ablation", "neither", "--seed", "0", "--epochs", "2", "--dim", "32",
         "--frames", "10", "--out", str(ckpt)]
    )
    if rc != 0:  # the split may drop a class; retry with another seed
        for seed in range(6, 20):
            assert dispatch(
                ["split", "--manifest", str(out_dir / "manifest.jsonl"), "--test-frac", "0.3",
                 "--seed", str(seed), "--out", str(split_path)]
            ) == 0
            rc = dispatch(
                ["train", "--manifest", str(out_dir / "manifest.jsonl"), "--split", str(split_path),
                 "--ablation", "neither", "--seed", "0", "--epochs", "2", "--dim", "32",
                 "--frames", "10", "--out", str(ckpt)]
            )
            if rc == 0:
                break
    assert rc == 0
    report_path = tmp_path / "preds.jsonl"
    assert dispatch(
        ["eval", "--ckpt", str(ckpt), "--manifest", str(out_dir / "manifest.jsonl"),
         "--split", str(split_path), "--report", str(report_path), "--json"]
    ) == 0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["clips"] > 0
    assert dispatch(
        ["report", "--predictions", str(report_path), "--truth", str(out_dir / "manifest.jsonl"),
         "--json"]
    ) == 0
    table = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(table["per_class_f1_pct"]) == {
        "DCM", "Myopathic", "Abnormal", "Cerebral Palsy", "Parkinson's", "Normal", "Style", "Exercise",
    }


def test_unknown_subcommand_exits_2(capsys):
    assert dispatch(["bogus"]) == 2
    err = capsys.readouterr().err
    assert "usage" in err.lower() or "invalid choice" in err


def test_missing_required_flag_exits_2(capsys):
    assert dispatch(["split"]) == 2


def test_domain_error_exits_1(tmp_path, capsys):
    missing = tmp_path / "nope.seq"
    assert dispatch(["metrics", "--seq", str(missing)]) == 1
    assert "FileNotFound" in capsys.readouterr().err


def test_resolved_config_printed(workspace, capsys):
    root, out_dir = workspace
    with open(out_dir / "manifest.jsonl", "rb") as fh:
        manifest = load_manifest(fh)
    seq_path = out_dir / manifest.records[0].path
    dispatch(["metrics", "--seq", str(seq_path)])
    err = capsys.readouterr().err
    assert "gaitlab metrics config:" in err


def test_study_summary_command(tmp_path, capsys):
    study_dir = tmp_path / "study"
    phrases = {
        "aurora": "High cadence with short left steps.",
        "borealis": "Irregular gait; few specifics.",
        "cascade": "Reduced knee excursion; long double support.",
    }
    cases = [
        ReviewCase(f"case{i}", "", {m: f"{t} ({i})" for m, t in phrases.items()})
        for i in range(4)
    ]
    store_study_file(str(study_dir), cases, list(phrases), ["r0"], seed=2)
    from gaitlab.review import load_study_dir, submit_rating, next_case

    study, store = load_study_dir(str(study_dir))
    for _ in range(4):
        payload = next_case(study, store, "r0")
        scores = {lab: {d: 4 for d in LIKERT_DIMENSIONS} for lab in "ABC"}
        submit_rating(study, store, "r0", payload["case_id"], scores, "A")
    rc = dispatch(["study-summary", "--study", str(study_dir), "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["rated"] == 4
    assert set(payload["preference_counts"]) == set(phrases)
