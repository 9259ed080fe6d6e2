"""Leakage-aware subject-disjoint splitting and synthetic gait cohort generation.

The generator builds sinusoidal joint trajectories with class-coded amplitude
and rhythm signatures. Heel strikes are constructed at hip-flexion maxima and
toe-offs at minima (both stationary points of the forward ankle excursion by
construction), so every clip ships with exact ground-truth event frames.
Two class pairs share their amplitude signature and differ only in cadence;
telling them apart requires temporal modeling.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .core import (
    ChannelTable,
    Manifest,
    ManifestRecord,
    SkelFrame,
    SkelSequence,
    serialize_skeleton_sequence,
)
from .errors import EmptyManifest, InvalidSpec, SingleSubject
from .util import rng_for


# ---------------------------------------------------------------------------
# subject-disjoint splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    test: tuple[str, ...]
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    seed: int
    test_fraction: float


@dataclass(frozen=True)
class SplitReport:
    passed: bool
    issues: tuple[str, ...]


def subject_disjoint_split(manifest: Manifest, test_fraction: float, seed: int) -> SplitManifest:
    """Whole subjects go to test until the test clip count first reaches
    test_fraction * total; ties in the seeded shuffle break by subject id.

    The last subject is never assigned to test, so the train side is always
    non-empty; the clip-count overshoot is bounded by the largest subject.
    """
    if len(manifest) == 0:
        raise EmptyManifest("cannot split an empty manifest")
    if not (0.0 < test_fraction < 1.0):
        raise InvalidSpec(f"test_fraction must be in (0, 1), got {test_fraction}")
    clips_of: dict[str, list[str]] = {}
    for r in manifest.records:
        clips_of.setdefault(r.subject_id, []).append(r.clip_id)
    subjects = sorted(clips_of)
    if len(subjects) < 2:
        raise SingleSubject("need at least 2 subjects to split")

    rng = rng_for("subject-split", seed)
    keys = rng.random(len(subjects))
    order = [s for _, s in sorted(zip(keys, subjects))]

    target = test_fraction * len(manifest)
    test_subjects: list[str] = []
    count = 0
    for subj in order:
        if count >= target:
            break
        if len(test_subjects) == len(subjects) - 1:
            break
        test_subjects.append(subj)
        count += len(clips_of[subj])

    test_set = set(test_subjects)
    train_subjects = [s for s in subjects if s not in test_set]
    train = tuple(r.clip_id for r in manifest.records if r.subject_id not in test_set)
    test = tuple(r.clip_id for r in manifest.records if r.subject_id in test_set)
    return SplitManifest(
        train=train,
        test=test,
        train_subjects=tuple(sorted(train_subjects)),
        test_subjects=tuple(sorted(test_subjects)),
        seed=seed,
        test_fraction=test_fraction,
    )


def verify_split(split: SplitManifest, manifest: Manifest) -> SplitReport:
    """Independent audit: partition coverage, declared membership, zero overlap."""
    issues: list[str] = []
    subject_of = {r.clip_id: r.subject_id for r in manifest.records}

    train_set, test_set = set(split.train), set(split.test)
    both = train_set & test_set
    for cid in sorted(both):
        issues.append(f"clip {cid!r} appears in both train and test")
    missing = set(subject_of) - train_set - test_set
    for cid in sorted(missing):
        issues.append(f"clip {cid!r} is in neither split side")
    unknown = (train_set | test_set) - set(subject_of)
    for cid in sorted(unknown):
        issues.append(f"clip {cid!r} is not in the manifest")

    train_subj = {subject_of[c] for c in train_set if c in subject_of}
    test_subj = {subject_of[c] for c in test_set if c in subject_of}
    for s in sorted(train_subj & test_subj):
        issues.append(f"subject {s!r} has clips on both sides")
    if tuple(sorted(train_subj)) != split.train_subjects:
        issues.append("declared train_subjects do not match clip membership")
    if tuple(sorted(test_subj)) != split.test_subjects:
        issues.append("declared test_subjects do not match clip membership")

    return SplitReport(passed=not issues, issues=tuple(issues))


def store_split(split: SplitManifest) -> bytes:
    obj = {
        "seed": split.seed,
        "test_fraction": split.test_fraction,
        "train": list(split.train),
        "test": list(split.test),
        "train_subjects": list(split.train_subjects),
        "test_subjects": list(split.test_subjects),
    }
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def load_split(stream) -> SplitManifest:
    text = stream.read() if hasattr(stream, "read") else stream
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    obj = json.loads(text)
    return SplitManifest(
        train=tuple(obj["train"]),
        test=tuple(obj["test"]),
        train_subjects=tuple(obj["train_subjects"]),
        test_subjects=tuple(obj["test_subjects"]),
        seed=obj["seed"],
        test_fraction=obj["test_fraction"],
    )


# ---------------------------------------------------------------------------
# synthetic cohort generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassArchetype:
    """Kinematic signature of one synthetic gait class (amplitudes in degrees)."""

    label: str
    cadence: float                  # steps per minute
    hip_amp: float
    knee_amp: float
    ankle_amp: float
    arm_amp: float
    pelvis_list_amp: float
    pelvis_rot_amp: float = 4.0
    pelvis_tilt_offset: float = 8.0
    pelvis_tilt_amp: float = 2.0
    hip_offset: float = 0.0
    knee_offset: float = 0.0
    lumbar_offset: float = 0.0
    thorax_offset: float = 0.0
    asymmetry: float = 0.0          # right-side phase lag in radians


@dataclass(frozen=True)
class SynthSpec:
    archetypes: tuple[ClassArchetype, ...]
    subjects_per_class: int = 8
    clips_per_subject: int = 5
    frames_per_clip: int = 180
    fps: float = 30.0
    noise_sigma: float = 0.3        # degrees
    subject_amp_jitter: float = 0.05

    def __post_init__(self):
        if not self.archetypes:
            raise InvalidSpec("need at least one archetype")
        if min(self.subjects_per_class, self.clips_per_subject, self.frames_per_clip) < 1:
            raise InvalidSpec("counts must be positive")
        if self.fps <= 0:
            raise InvalidSpec("fps must be positive")
        if self.noise_sigma < 0 or self.subject_amp_jitter < 0:
            raise InvalidSpec("noise parameters must be >= 0")


# Signature coding across the 8 default classes:
#   * Myopathic/Abnormal and Style/Exercise are rhythm-coded pairs: identical
#     amplitude signatures inside each pair, distinguishable only by cadence.
#   * Myopathic/Abnormal additionally share the Normal limb silhouette and are
#     marked off from Normal only by pelvis tilt/list, channels the appearance
#     encoder cannot see; only the biomechanical text carries them.
_LIMB_NORMAL = dict(hip_amp=30.0, knee_amp=60.0, ankle_amp=10.0, arm_amp=20.0)
_MYOPATHIC_LIKE = dict(
    **_LIMB_NORMAL, pelvis_list_amp=16.0, pelvis_tilt_offset=22.0,
)
_STYLE_LIKE = dict(
    hip_amp=36.0, knee_amp=66.0, ankle_amp=12.0, arm_amp=34.0,
    pelvis_list_amp=8.0, pelvis_tilt_offset=4.0,
)

DEFAULT_ARCHETYPES: tuple[ClassArchetype, ...] = (
    ClassArchetype(
        label="DCM", cadence=88.0, hip_amp=18.0, knee_amp=35.0, ankle_amp=6.0,
        arm_amp=12.0, pelvis_list_amp=5.0, knee_offset=8.0, lumbar_offset=5.0,
        asymmetry=0.10,
    ),
    ClassArchetype(label="Myopathic", cadence=96.0, **_MYOPATHIC_LIKE),
    ClassArchetype(label="Abnormal", cadence=138.0, **_MYOPATHIC_LIKE),
    ClassArchetype(
        label="Cerebral Palsy", cadence=104.0, hip_amp=22.0, knee_amp=40.0,
        ankle_amp=5.0, arm_amp=10.0, pelvis_list_amp=6.0, hip_offset=18.0,
        knee_offset=28.0,
    ),
    ClassArchetype(
        label="Parkinson's", cadence=150.0, hip_amp=10.0, knee_amp=22.0,
        ankle_amp=4.0, arm_amp=3.0, pelvis_list_amp=3.0, thorax_offset=12.0,
        pelvis_tilt_offset=10.0,
    ),
    ClassArchetype(
        label="Normal", cadence=100.0, pelvis_list_amp=4.0, **_LIMB_NORMAL,
    ),
    ClassArchetype(label="Style", cadence=108.0, **_STYLE_LIKE),
    ClassArchetype(label="Exercise", cadence=156.0, **_STYLE_LIKE),
)

RHYTHM_CODED_PAIRS: tuple[tuple[str, str], ...] = (
    ("Myopathic", "Abnormal"),
    ("Style", "Exercise"),
)

# Classes separable from each other only through pelvis channels that the
# appearance stub cannot see (plus, within the pair, cadence).
BIO_CODED_TRIPLE: tuple[str, str, str] = ("Normal", "Myopathic", "Abnormal")

DEFAULT_SYNTH_SPEC = SynthSpec(archetypes=DEFAULT_ARCHETYPES)


@dataclass(frozen=True)
class ClipTruth:
    """Ground-truth events and nominal timing metrics recorded at generation."""

    clip_id: str
    heel_strikes_left: tuple[int, ...]
    heel_strikes_right: tuple[int, ...]
    toe_offs_left: tuple[int, ...]
    toe_offs_right: tuple[int, ...]
    cadence: float
    step_time_left: float
    step_time_right: float
    asymmetry_index: float


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def _event_frames(phase0: float, target: float, omega: float, fps: float, n_frames: int):
    """Frames where omega*t + phase0 hits target (mod 2pi), rounded to grid."""
    frames = []
    n = math.floor((phase0 - target) / (2.0 * math.pi))
    while True:
        t = (target - phase0 + 2.0 * math.pi * n) / omega
        n += 1
        if t < 0:
            continue
        fr = round(t * fps)
        if fr > n_frames - 1:
            break
        if fr >= 0 and (not frames or fr > frames[-1]):
            frames.append(fr)
    return tuple(frames)


def synthesize_clip(
    arch: ClassArchetype,
    clip_id: str,
    subject_id: str,
    spec: SynthSpec,
    phase: float,
    amp_scale: float,
    noise_rng: np.random.Generator,
    table: ChannelTable | None = None,
) -> tuple[SkelSequence, ClipTruth]:
    """One clip of sinusoidal gait plus its constructed ground truth."""
    table = table or ChannelTable.default()
    n = spec.frames_per_clip
    f_stride = arch.cadence / 120.0           # strides per second (2 steps each)
    omega = 2.0 * math.pi * f_stride
    delta = arch.asymmetry
    t = np.arange(n) / spec.fps
    theta = omega * t + phase
    theta_r = theta - math.pi - delta

    s = amp_scale
    angles = np.zeros((n, 46))

    def put(segment, channel, values):
        angles[:, table.index_of(segment, channel)] = values

    put("Pelvis", "tilt", arch.pelvis_tilt_offset + s * arch.pelvis_tilt_amp * np.sin(2 * theta))
    put("Pelvis", "list", s * arch.pelvis_list_amp * np.sin(theta))
    put("Pelvis", "rotation", s * arch.pelvis_rot_amp * np.sin(theta))
    put("Lumbar", "flex", arch.lumbar_offset)
    put("Thorax", "flex", arch.thorax_offset)
    put("L.Hip", "flex", arch.hip_offset + s * arch.hip_amp * np.sin(theta))
    put("R.Hip", "flex", arch.hip_offset + s * arch.hip_amp * np.sin(theta_r))
    put("L.Knee", "flex", arch.knee_offset + s * arch.knee_amp * 0.5 * (1 - np.cos(theta - math.pi / 2)))
    put("R.Knee", "flex", arch.knee_offset + s * arch.knee_amp * 0.5 * (1 - np.cos(theta_r - math.pi / 2)))
    put("L.Ankle", "dorsiflex", s * arch.ankle_amp * np.sin(theta + math.pi / 2))
    put("R.Ankle", "dorsiflex", s * arch.ankle_amp * np.sin(theta_r + math.pi / 2))
    put("L.Shoulder", "flex", s * arch.arm_amp * np.sin(theta - math.pi))
    put("R.Shoulder", "flex", s * arch.arm_amp * np.sin(theta))
    put("L.Elbow", "flex", 20.0 + s * 0.5 * arch.arm_amp * np.sin(theta - math.pi))
    put("R.Elbow", "flex", 20.0 + s * 0.5 * arch.arm_amp * np.sin(theta))

    if spec.noise_sigma > 0:
        angles = angles + noise_rng.normal(0.0, spec.noise_sigma, size=angles.shape)

    frames = tuple(SkelFrame(i, tuple(float(a) for a in angles[i])) for i in range(n))
    seq = SkelSequence(
        subject_id=subject_id,
        clip_id=clip_id,
        label=arch.label,
        fps=spec.fps,
        frames=frames,
        channel_table=table.name,
    )

    half = math.pi / 2.0
    period = 1.0 / f_stride
    step_r = (math.pi + delta) / omega
    step_l = (math.pi - delta) / omega
    truth = ClipTruth(
        clip_id=clip_id,
        heel_strikes_left=_event_frames(phase, half, omega, spec.fps, n),
        heel_strikes_right=_event_frames(phase - math.pi - delta, half, omega, spec.fps, n),
        toe_offs_left=_event_frames(phase, 3 * half, omega, spec.fps, n),
        toe_offs_right=_event_frames(phase - math.pi - delta, 3 * half, omega, spec.fps, n),
        cadence=arch.cadence,
        step_time_left=step_l,
        step_time_right=step_r,
        asymmetry_index=abs(step_l - step_r) / (0.5 * (step_l + step_r)) * 100.0,
    )
    assert abs((step_l + step_r) - period) < 1e-9
    return seq, truth


def generate_synthetic_cohort(
    spec: SynthSpec, seed: int, out_dir: str
) -> tuple[Manifest, list[ClipTruth]]:
    """Write sequence files, a manifest, and the ground-truth sidecar.

    Every clip's randomness derives from hash(seed, clip_id) so the cohort is
    byte-identical for a fixed (spec, seed) regardless of generation order.
    """
    table = ChannelTable.default()
    clips_dir = os.path.join(out_dir, "clips")
    os.makedirs(clips_dir, exist_ok=True)

    records = []
    truths = []
    for arch in spec.archetypes:
        slug = _slug(arch.label)
        for si in range(spec.subjects_per_class):
            subject_id = f"{slug}-subj{si:02d}"
            subj_rng = rng_for("synth-subject", seed, subject_id)
            amp_scale = 1.0 + spec.subject_amp_jitter * (2.0 * subj_rng.random() - 1.0)
            for ci in range(spec.clips_per_subject):
                clip_id = f"{slug}-s{si:02d}-c{ci:02d}"
                clip_rng = rng_for("synth-clip", seed, clip_id)
                phase = 2.0 * math.pi * clip_rng.random()
                seq, truth = synthesize_clip(
                    arch, clip_id, subject_id, spec, phase, amp_scale, clip_rng, table
                )
                rel_path = os.path.join("clips", f"{clip_id}.seq")
                with open(os.path.join(out_dir, rel_path), "wb") as fh:
                    fh.write(serialize_skeleton_sequence(seq))
                records.append(
                    ManifestRecord(
                        clip_id=clip_id,
                        subject_id=subject_id,
                        label=arch.label,
                        source="SYNTH",
                        path=rel_path,
                    )
                )
                truths.append(truth)

    manifest = Manifest(tuple(records))
    from .core import store_manifest

    with open(os.path.join(out_dir, "manifest.jsonl"), "wb") as fh:
        fh.write(store_manifest(manifest))
    with open(os.path.join(out_dir, "sidecar.jsonl"), "w", encoding="utf-8") as fh:
        for tr in truths:
            fh.write(json.dumps(_truth_to_json(tr), sort_keys=True) + "\n")
    return manifest, truths


def _truth_to_json(tr: ClipTruth) -> dict:
    return {
        "clip_id": tr.clip_id,
        "heel_strikes_left": list(tr.heel_strikes_left),
        "heel_strikes_right": list(tr.heel_strikes_right),
        "toe_offs_left": list(tr.toe_offs_left),
        "toe_offs_right": list(tr.toe_offs_right),
        "nominal": {
            "cadence": tr.cadence,
            "step_time_left": tr.step_time_left,
            "step_time_right": tr.step_time_right,
            "asymmetry_index": tr.asymmetry_index,
        },
    }


def load_sidecar(stream) -> list[ClipTruth]:
    text = stream.read() if hasattr(stream, "read") else stream
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    out = []
    for ln in text.split("\n"):
        if not ln.strip():
            continue
        obj = json.loads(ln)
        nom = obj["nominal"]
        out.append(
            ClipTruth(
                clip_id=obj["clip_id"],
                heel_strikes_left=tuple(obj["heel_strikes_left"]),
                heel_strikes_right=tuple(obj["heel_strikes_right"]),
                toe_offs_left=tuple(obj["toe_offs_left"]),
                toe_offs_right=tuple(obj["toe_offs_right"]),
                cadence=nom["cadence"],
                step_time_left=nom["step_time_left"],
                step_time_right=nom["step_time_right"],
                asymmetry_index=nom["asymmetry_index"],
            )
        )
    return out


def load_synth_spec(stream) -> SynthSpec:
    """Read a SynthSpec from its JSON file form (see store_synth_spec)."""
    text = stream.read() if hasattr(stream, "read") else stream
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    obj = json.loads(text)
    try:
        archetypes = tuple(ClassArchetype(**a) for a in obj.pop("archetypes"))
        return SynthSpec(archetypes=archetypes, **obj)
    except TypeError as e:
        raise InvalidSpec(f"bad synth spec: {e}") from None
    except KeyError:
        raise InvalidSpec("synth spec must contain an 'archetypes' list") from None


def store_synth_spec(spec: SynthSpec) -> bytes:
    obj = {
        "archetypes": [vars(a).copy() for a in spec.archetypes],
        "subjects_per_class": spec.subjects_per_class,
        "clips_per_subject": spec.clips_per_subject,
        "frames_per_clip": spec.frames_per_clip,
        "fps": spec.fps,
        "noise_sigma": spec.noise_sigma,
        "subject_amp_jitter": spec.subject_amp_jitter,
    }
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")
