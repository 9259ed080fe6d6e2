"""Acceptance suite: one test per release criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines
as they complete. The ablation criterion trains four model variants and
dominates the runtime (several minutes single-core).
"""

from __future__ import annotations

import functools
import json
import math
import sys
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from conftest import frame_with
from gaitlab import autograd as ag
from gaitlab.autograd import PRIMITIVE_OPS, Tensor, corrupt_backward
from gaitlab.core import ChannelTable, Manifest, ManifestRecord, Taxonomy
from gaitlab.datasets import (
    DEFAULT_SYNTH_SPEC,
    RHYTHM_CODED_PAIRS,
    generate_synthetic_cohort,
    subject_disjoint_split,
    verify_split,
)
from gaitlab.fusion import (
    BackboneConfig,
    HeadParams,
    StubBackbone,
    class_weights,
    concat_final,
    embed_tokens,
    fuse_and_encode,
)
from gaitlab.gait import GaitEvents, compute_metrics, detect_gait_events
from gaitlab.review import RatingStore, ReviewCase, create_study
from gaitlab.server import StudyServer
from gaitlab.stats import (
    LIKERT_DIMENSIONS,
    ConfusionMatrix,
    accuracy,
    binomial_test,
    macro_f1,
    per_class_f1,
)
from gaitlab.ted import TedConfig, init_ted, ted_forward
from gaitlab.tokenizer import TokenizerConfig, render_frame, tokenize_and_truncate
from gaitlab.train import PipelineConfig, TrainConfig, evaluate, train
from gaitlab.util import rng_for

COHORT_SEED = 11
SPLIT_SEED = 21
TRAIN_SEED = 0


def _announce(line: str) -> None:
    # bypass pytest capture so the per-criterion verdict always shows
    print(line, file=sys.__stdout__, flush=True)


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                _announce(f"\n[acceptance] {name}: FAIL")
                raise
            _announce(f"\n[acceptance] {name}: PASS")
            return result

        return wrapper

    return deco


# ---------------------------------------------------------------------------
# gradient fidelity
# ---------------------------------------------------------------------------

def _full_loss_setup():
    cfg = TedConfig(M=4, L=2, H=4, D=16)
    params = init_ted(cfg, T_max=8, seed=7)
    head = HeadParams.init(K=8, D=16, seed=7)
    backbone = StubBackbone(BackboneConfig(D=16, seed=0))
    v = rng_for("acc-grad-v", 3).normal(size=(8, 16))
    tokens = ["Frame", "0:", "[Pelvis]", "tilt=12°", "list=-2°", "flex=41°"]
    e_bio = embed_tokens(tokens, 16, 0)

    def loss_fn():
        f_temp = ted_forward(params, v).f_temp
        f_vlm = fuse_and_encode(v, e_bio, backbone)
        logits = head.logits(concat_final(f_vlm, f_temp))
        return ag.weighted_ce(logits, 3, 1.25)

    return loss_fn, params, head


def _tape_ops(loss: Tensor) -> set[str]:
    ops, seen, stack = set(), set(), [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and node.op != "leaf":
            ops.add(node.op)
        stack.extend(node._prev)
    return ops


@criterion("gradient fidelity (full loss < 1e-4, mutations detected, < 60 s)")
def test_gradient_fidelity():
    t0 = time.time()
    loss_fn, params, head = _full_loss_setup()
    all_params = params.parameters() + head.parameters()

    err = ag.grad_check(loss_fn, all_params)
    assert err < 1e-4, f"clean gradient error {err:.3e}"

    # A small probe subset whose gradients traverse every taped primitive;
    # backward mutations leave the numeric side untouched, so the finite
    # differences computed once here are exactly what grad_check would
    # recompute per mutation.
    named = params.named()
    probe = [
        (named["queries"], slice(None)),           # covers the decoder stack
        (named["pos_emb"], slice(0, None, 4)),     # covers slice_rows / memory keys
        (head.W, slice(0, None, 8)),               # covers matvec and the loss
        (head.b, slice(None)),
    ]
    eps = 1e-5
    numeric = {}
    with ag.no_grad():
        for p, sel in probe:
            flat = p.data.reshape(-1)
            idxs = np.arange(flat.shape[0])[sel]
            vals = np.empty(idxs.shape[0])
            for j, i in enumerate(idxs):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                vals[j] = (f_plus - f_minus) / (2 * eps)
            numeric[p.name] = (idxs, vals)

    def max_rel_err():
        for p in all_params:
            p.tensor.zero_grad()
        loss = loss_fn()
        loss.backward()
        worst = 0.0
        for p, _ in probe:
            idxs, n = numeric[p.name]
            a = (p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data)).reshape(-1)[idxs]
            rel = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
            worst = max(worst, float(rel.max()))
        return worst

    ops = _tape_ops(loss_fn()) & PRIMITIVE_OPS
    assert {"matmul", "softmax_rows", "layer_norm", "gelu", "mean_pool_rows",
            "weighted_ce", "matvec", "concat_vecs", "add"} <= ops
    for op in sorted(ops):
        with corrupt_backward(op, 1.01):
            err_op = max_rel_err()
        assert err_op > 1e-3, f"mutated backward of {op!r} went undetected ({err_op:.2e})"

    elapsed = time.time() - t0
    assert elapsed < 60.0, f"gradient-fidelity criterion took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# loss-weight arithmetic
# ---------------------------------------------------------------------------

@criterion("class-weight and uniform-loss arithmetic")
def test_loss_weight_arithmetic():
    cw = class_weights([8, 2], N=10)
    assert cw.w == (0.625, 2.5)
    assert class_weights([4, 4, 4]).w == (1.0, 1.0, 1.0)
    loss = ag.weighted_ce(Tensor(np.zeros(8)), 0, 1.0)
    assert abs(loss.item() - math.log(8)) < 1e-12


# ---------------------------------------------------------------------------
# fusion shapes and positional symmetry
# ---------------------------------------------------------------------------

@criterion("descriptor shapes and positional (in)variance")
def test_shapes_and_symmetry():
    D, T = 64, 16
    params = init_ted(TedConfig(M=32, L=3, H=4, D=D), T_max=T, seed=5)
    v = rng_for("acc-sym", 1).normal(size=(T, D))

    f_temp = ted_forward(params, v).f_temp
    assert f_temp.data.shape == (D,)

    tokens = [f"tok{i}" for i in range(11)]
    e_bio = embed_tokens(tokens, D, 0)
    z = ag.concat_rows([Tensor(v), e_bio])
    assert z.data.shape == (T + len(tokens), D)

    perm = rng_for("acc-sym", 2).permutation(T)
    sensitive = ted_forward(params, v[perm]).f_temp
    assert np.max(np.abs(f_temp.data - sensitive.data)) > 1e-6

    params.pos_emb.tensor.data[...] = 0.0
    a = ted_forward(params, v).f_temp
    b = ted_forward(params, v[perm]).f_temp
    assert np.max(np.abs(a.data - b.data)) <= 1e-9


# ---------------------------------------------------------------------------
# template byte-exactness and token budget
# ---------------------------------------------------------------------------

@criterion("frame-template byte exactness and 1024-token cap")
def test_template_and_budget():
    table = ChannelTable.default()
    subset = (("Pelvis", "tilt"), ("Pelvis", "list"), ("R.Knee", "flex"))
    cfg = TokenizerConfig(channel_subset=subset, decimals=1)
    golden = [
        ({("Pelvis", "tilt"): 12.34, ("Pelvis", "list"): -2.0, ("R.Knee", "flex"): 41.25}, 3,
         "Frame 3: [Pelvis] tilt=12.3° list=-2.0° [R.Knee] flex=41.2°"),
        ({}, 0, "Frame 0: [Pelvis] tilt=0.0° list=0.0° [R.Knee] flex=0.0°"),
        ({("Pelvis", "tilt"): 7.25, ("Pelvis", "list"): -0.04, ("R.Knee", "flex"): 179.96}, 12,
         "Frame 12: [Pelvis] tilt=7.2° list=-0.0° [R.Knee] flex=180.0°"),
        ({("Pelvis", "tilt"): -33.333, ("Pelvis", "list"): 0.05, ("R.Knee", "flex"): 55.549}, 7,
         "Frame 7: [Pelvis] tilt=-33.3° list=0.1° [R.Knee] flex=55.5°"),
    ]
    for values, idx, expected in golden:
        line = render_frame(frame_with(table, values, index=idx), table, cfg)
        assert line == expected, f"{line!r} != {expected!r}"

    words = " ".join(f"w{i}" for i in range(1500))
    out = tokenize_and_truncate(words, 1024)
    assert len(out) == 1024
    assert out == words.split()[:1024]


# ---------------------------------------------------------------------------
# split protocol
# ---------------------------------------------------------------------------

def _clinic_manifest(n_subjects=30, n_clips=239, seed=17) -> Manifest:
    rng = rng_for("acc-clinic", seed)
    weights = rng.uniform(0.5, 1.5, size=n_subjects)
    sizes = np.maximum(1, np.round(weights / weights.sum() * n_clips).astype(int))
    while sizes.sum() != n_clips:
        i = int(rng.integers(0, n_subjects))
        if sizes.sum() > n_clips and sizes[i] > 1:
            sizes[i] -= 1
        elif sizes.sum() < n_clips:
            sizes[i] += 1
    records = []
    for s, count in enumerate(sizes):
        for c in range(count):
            records.append(
                ManifestRecord(f"p{s:02d}-c{c:02d}", f"patient{s:02d}", "DCM", "DCM", "x.seq")
            )
    return Manifest(tuple(records))


@criterion("subject-disjoint split protocol (clinic shape + 1000-seed sweep)")
def test_split_protocol():
    manifest = _clinic_manifest()
    subject_of = {r.clip_id: r.subject_id for r in manifest.records}
    max_subject = max(Counter(subject_of.values()).values())

    split = subject_disjoint_split(manifest, 0.2, seed=SPLIT_SEED)
    assert abs(len(split.test) - 0.2 * 239) <= max_subject  # near 52 clips
    assert verify_split(split, manifest).passed

    for seed in range(1000):
        s = subject_disjoint_split(manifest, 0.2, seed)
        train_subj = {subject_of[c] for c in s.train}
        test_subj = {subject_of[c] for c in s.test}
        assert not (train_subj & test_subj), f"subject overlap at seed {seed}"
        assert len(s.train) + len(s.test) == 239
        assert abs(len(s.test) - 0.2 * 239) <= max_subject

    # every injected violation must be caught
    caught = 0
    for seed in range(50):
        s = subject_disjoint_split(manifest, 0.2, seed)
        donor = next(
            subj for subj in s.train_subjects
            if sum(1 for c in s.train if subject_of[c] == subj) >= 2
        )
        moved = next(c for c in s.train if subject_of[c] == donor)
        bad = replace(s, train=tuple(c for c in s.train if c != moved), test=s.test + (moved,))
        report = verify_split(bad, manifest)
        assert not report.passed
        assert any(donor in issue for issue in report.issues)
        caught += 1
    dropped = replace(split, test=split.test[1:])
    assert not verify_split(dropped, manifest).passed
    doubled = replace(split, test=split.test + (split.train[0],))
    assert not verify_split(doubled, manifest).passed
    relabeled = replace(split, train_subjects=split.train_subjects[1:])
    assert not verify_split(relabeled, manifest).passed
    assert caught == 50


# ---------------------------------------------------------------------------
# binomial reproduction
# ---------------------------------------------------------------------------

@criterion("exact binomial tail (36/52 significant; boundary closed form)")
def test_binomial_reproduction():
    p = binomial_test(36, 52, 1 / 3)
    assert p < 0.001
    exact = Fraction(0)
    for i in range(36, 53):
        exact += Fraction(math.comb(52, i)) * Fraction(1, 3) ** i * Fraction(2, 3) ** (52 - i)
    assert abs(p - float(exact)) / float(exact) < 1e-12

    boundary = binomial_test(52, 52, 1 / 3)
    reference = (1 / 3) ** 52
    assert abs(boundary - reference) / reference < 1e-15


# ---------------------------------------------------------------------------
# metric oracle
# ---------------------------------------------------------------------------

@criterion("gait-metric oracle (events ±1 frame, cadence ±2, asymmetry)")
def test_metric_oracle(tmp_path):
    spec = replace(
        DEFAULT_SYNTH_SPEC, noise_sigma=0.0, subject_amp_jitter=0.0,
        subjects_per_class=1, clips_per_subject=2,
    )
    manifest, truths = generate_synthetic_cohort(spec, 23, str(tmp_path))
    truth_of = {t.clip_id: t for t in truths}
    n = spec.frames_per_clip
    margin = 9  # extrema this close to a clip edge lack detectable prominence

    from gaitlab.train import load_split_clips

    seqs = load_split_clips(manifest, [r.clip_id for r in manifest.records], str(tmp_path))
    for seq in seqs:
        truth = truth_of[seq.clip_id]
        ev = detect_gait_events(seq)
        for detected, actual in (
            (ev.heel_strikes_left, truth.heel_strikes_left),
            (ev.heel_strikes_right, truth.heel_strikes_right),
            (ev.toe_offs_left, truth.toe_offs_left),
            (ev.toe_offs_right, truth.toe_offs_right),
        ):
            actual_arr = np.array(actual)
            detected_arr = np.array(detected)
            for d in detected:
                assert np.min(np.abs(actual_arr - d)) <= 1, seq.clip_id
            for a in actual:
                if margin <= a <= n - 1 - margin:
                    assert np.min(np.abs(detected_arr - a)) <= 1, seq.clip_id
        metrics = compute_metrics(ev, seq.fps)
        assert abs(metrics.cadence - truth.cadence) <= 2.0, seq.clip_id
        if seq.label == "Normal":  # symmetric archetype with integer frame period
            assert metrics.asymmetry_index < 1e-9

    # reference asymmetry arithmetic: 0.50 s vs 0.81 s
    rs, ls, t = [0], [], 0
    for _ in range(4):
        t += 50
        ls.append(t)
        t += 81
        rs.append(t)
    ev = GaitEvents(
        heel_strikes_left=tuple(ls),
        heel_strikes_right=tuple(rs),
        toe_offs_left=tuple(s + 20 for s in ls[:-1]),
        toe_offs_right=tuple(s + 20 for s in rs[:-1]),
    )
    m = compute_metrics(ev, fps=100.0)
    assert abs(m.asymmetry_index - 47.3282) < 0.1


# ---------------------------------------------------------------------------
# ablation narrative
# ---------------------------------------------------------------------------

@criterion("ablation narrative at desk scale (< 10 min, seed-fixed)")
def test_ablation_narrative(tmp_path):
    t0 = time.time()
    taxonomy = Taxonomy()
    manifest, _ = generate_synthetic_cohort(DEFAULT_SYNTH_SPEC, COHORT_SEED, str(tmp_path))
    split = subject_disjoint_split(manifest, 0.2, SPLIT_SEED)
    assert verify_split(split, manifest).passed
    test_labels = Counter(
        r.label for r in manifest.records if r.clip_id in set(split.test)
    )
    assert len(test_labels) == taxonomy.K  # every class represented held-out

    pipeline = PipelineConfig()
    results = {}
    for ablation in ("full", "no_ted", "no_bio", "neither"):
        cfg = TrainConfig(seed=TRAIN_SEED, ablation=ablation)
        ckpt = train(manifest, split.train, taxonomy, pipeline, cfg, base_dir=str(tmp_path))
        report = evaluate(ckpt, manifest, split.test, base_dir=str(tmp_path))
        cm = ConfusionMatrix.from_predictions(
            [e.true_label for e in report.entries],
            [e.predicted for e in report.entries],
            taxonomy,
        )
        f1 = per_class_f1(cm)
        rhythm = float(np.mean([
            f1[taxonomy.index(c)] for pair in RHYTHM_CODED_PAIRS for c in pair
        ]))
        results[ablation] = {"acc": accuracy(cm), "rhythm_f1": rhythm, "macro": macro_f1(cm)}
        _announce(f"  [ablation] {ablation}: acc={results[ablation]['acc']:.1f}% "
                  f"rhythm-pair F1={rhythm:.1f} macro={results[ablation]['macro']:.1f}")

    assert results["full"]["acc"] >= 90.0
    assert results["no_ted"]["rhythm_f1"] < results["full"]["rhythm_f1"]
    worst = min(results[a]["acc"] for a in ("full", "no_ted", "no_bio"))
    assert results["neither"]["acc"] <= worst
    assert results["neither"]["acc"] < results["full"]["acc"]

    elapsed = time.time() - t0
    assert elapsed < 600.0, f"ablation suite took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# F1 conventions
# ---------------------------------------------------------------------------

@criterion("per-class F1 zero convention and brute-force macro agreement")
def test_f1_conventions():
    taxonomy = Taxonomy()
    counts = np.zeros((8, 8), dtype=int)
    counts[0, 0] = 5
    counts[1, 2] = 3  # class 1 never predicted correctly; class 2 never true
    cm = ConfusionMatrix(taxonomy, counts)
    f1 = per_class_f1(cm)
    assert f1[1] == 0.0 and f1[2] == 0.0
    assert all(f1[k] == 0.0 for k in range(3, 8))

    rng = rng_for("acc-f1", 0)
    for _ in range(50):
        counts = rng.integers(0, 15, size=(8, 8))
        if counts.sum() == 0:
            continue
        cm = ConfusionMatrix(taxonomy, counts)
        f1 = per_class_f1(cm)
        brute = []
        for i in range(8):
            tp = counts[i, i]
            p = tp / counts[:, i].sum() if counts[:, i].sum() else 0.0
            r = tp / counts[i, :].sum() if counts[i, :].sum() else 0.0
            brute.append(0.0 if p + r == 0 else 2 * p * r / (p + r) * 100)
        assert np.max(np.abs(np.array(f1) - np.array(brute))) < 1e-12
        assert abs(macro_f1(cm) - float(np.mean(brute))) < 1e-12


# ---------------------------------------------------------------------------
# review service protocol
# ---------------------------------------------------------------------------

def _http(method, port, path, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(f"http://127.0.0.1:{port}{path}", data=data, method=method)
    if data:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


@criterion("review-service protocol (blinding, 36/52 preference, concurrency)")
def test_review_service_protocol(tmp_path):
    models = ("aurora", "borealis", "cascade")
    phrasing = {
        "aurora": "Cadence {i} is elevated; left steps shortened.",
        "borealis": "Pattern {i} looks irregular overall.",
        "cascade": "Case {i}: reduced knee excursion, long double support.",
    }
    cases = [
        ReviewCase(f"case{i:03d}", "", {m: phrasing[m].format(i=i) for m in models})
        for i in range(52)
    ]
    raters = [f"rater{i}" for i in range(4)]
    study = create_study(cases, models, raters, seed=12)
    assert sorted(len(v) for v in study.assignment.values()) == [13, 13, 13, 13]

    store = RatingStore(str(tmp_path / "ratings.jsonl"))
    server = StudyServer(study, store, port=0)
    server.start()
    try:
        collected = []
        target_wins = 36
        submitted = 0
        winner = "cascade"
        for rater in raters:
            while True:
                status, body = _http("GET", server.port, f"/api/raters/{rater}/next")
                collected.append(body)
                payload = json.loads(body)
                if payload.get("complete"):
                    break
                case_id = payload["case_id"]
                # de-blinding oracle: invert the stored permutation
                label_of = {m: lab for lab, m in zip("ABC", study.blinding[case_id])}
                pick = winner if submitted < target_wins else "aurora"
                scores = {lab: {d: 4 for d in LIKERT_DIMENSIONS} for lab in "ABC"}
                status, body = _http(
                    "POST", server.port, f"/api/raters/{rater}/ratings",
                    {"case_id": case_id, "scores": scores, "best": label_of[pick]},
                )
                assert status == 200, body
                collected.append(body)
                submitted += 1
        status, body = _http("GET", server.port, "/api/summary")
        assert status == 200
        collected.append(body)

        blob = b"".join(collected).decode()
        for m in models:
            assert m not in blob, f"model name {m!r} leaked through the API"

        # de-blinding round-trip: every stored pick is the intended model
        picks = Counter(r.best_model for r in store.records())
        assert picks[winner] == target_wins
        assert len(store.records()) == 52

        from gaitlab.review import study_summary

        s = study_summary(study, store)
        assert s.preferred_model == winner
        assert round(s.preference_share, 1) == 69.2
        assert s.p_value < 0.001
    finally:
        server.stop()

    # concurrent duplicate submissions: exactly one record lands
    store2 = RatingStore(str(tmp_path / "ratings2.jsonl"))
    server2 = StudyServer(study, store2, port=0)
    server2.start()
    try:
        _, body = _http("GET", server2.port, "/api/raters/rater0/next")
        case_id = json.loads(body)["case_id"]
        payload = {
            "case_id": case_id,
            "scores": {lab: {d: 3 for d in LIKERT_DIMENSIONS} for lab in "ABC"},
            "best": "A",
        }
        barrier = threading.Barrier(2)
        codes = []

        def fire():
            barrier.wait()
            codes.append(_http("POST", server2.port, "/api/raters/rater0/ratings", payload)[0])

        threads = [threading.Thread(target=fire) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(codes) == [200, 409]
        assert len(store2.records()) == 1
    finally:
        server2.stop()
