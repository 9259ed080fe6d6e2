"""Data model and file ingestion for skeleton sequences, frame features, and manifests.

File formats (all UTF-8, line-delimited):

* Skeleton sequence -- first line a JSON header object with keys
  ``subject_id``, ``clip_id``, ``label``, ``fps``, ``channel_table``;
  each following line ``frame_index,a1,...,a46`` with angles in degrees
  as decimal text. Serialization is canonical (shortest round-trip float
  repr, sorted header keys), so serialize(parse(x)) == x for files this
  package writes.
* Feature file -- header line ``T D`` followed by T lines of D decimal
  values (shortest round-trip repr; bit-exact on reload).
* Manifest -- one JSON object per line with keys ``clip_id``,
  ``subject_id``, ``label``, ``source``, ``path``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadLabel,
    EmptyManifest,
    EmptySequence,
    HeaderMismatch,
    MalformedRecord,
    NonFiniteValue,
    WrongDimension,
)

N_CHANNELS = 46

DEFAULT_ANGLE_RANGE = (-180.0, 180.0)


@dataclass(frozen=True)
class ChannelSpec:
    segment: str
    channel: str
    unit: str = "deg"
    lo: float = DEFAULT_ANGLE_RANGE[0]
    hi: float = DEFAULT_ANGLE_RANGE[1]


def _default_channel_entries() -> tuple[ChannelSpec, ...]:
    # 46 joint-angle channels covering pelvis, spine, and limbs. The exact
    # ordering is configuration, not a contract with any upstream estimator.
    triples = [
        ("Pelvis", ("tilt", "list", "rotation")),
        ("Lumbar", ("flex", "bend", "rot")),
        ("Thorax", ("flex", "bend", "rot")),
        ("Neck", ("flex", "bend", "rot")),
        ("L.Hip", ("flex", "add", "rot")),
        ("R.Hip", ("flex", "add", "rot")),
    ]
    entries: list[ChannelSpec] = []
    for seg, chans in triples:
        entries.extend(ChannelSpec(seg, c) for c in chans)
    for seg in ("L.Knee", "R.Knee"):
        entries.append(ChannelSpec(seg, "flex"))
        entries.append(ChannelSpec(seg, "rot"))
    for seg in ("L.Ankle", "R.Ankle"):
        entries.append(ChannelSpec(seg, "dorsiflex"))
        entries.append(ChannelSpec(seg, "inversion"))
    for seg in ("L.Toes", "R.Toes"):
        entries.append(ChannelSpec(seg, "flex"))
    for seg in ("L.Clavicle", "R.Clavicle"):
        entries.append(ChannelSpec(seg, "elev"))
        entries.append(ChannelSpec(seg, "prot"))
    for seg in ("L.Shoulder", "R.Shoulder"):
        entries.extend(ChannelSpec(seg, c) for c in ("flex", "abd", "rot"))
    for seg in ("L.Elbow", "R.Elbow"):
        entries.append(ChannelSpec(seg, "flex"))
        entries.append(ChannelSpec(seg, "pron"))
    for seg in ("L.Wrist", "R.Wrist"):
        entries.append(ChannelSpec(seg, "flex"))
        entries.append(ChannelSpec(seg, "dev"))
    assert len(entries) == N_CHANNELS
    return tuple(entries)


@dataclass(frozen=True)
class ChannelTable:
    """Ordered registry of the 46 (segment, channel) angle slots."""

    name: str
    entries: tuple[ChannelSpec, ...]

    def __post_init__(self):
        if len(self.entries) != N_CHANNELS:
            raise WrongDimension(
                f"channel table {self.name!r} has {len(self.entries)} entries, expected {N_CHANNELS}"
            )
        keys = [(e.segment, e.channel) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise MalformedRecord(f"channel table {self.name!r} has duplicate (segment, channel) pairs")

    @staticmethod
    def default() -> "ChannelTable":
        return _DEFAULT_TABLE

    def index_of(self, segment: str, channel: str) -> int:
        key = (segment, channel)
        for i, e in enumerate(self.entries):
            if (e.segment, e.channel) == key:
                return i
        raise KeyError(key)

    def has(self, segment: str, channel: str) -> bool:
        return any((e.segment, e.channel) == (segment, channel) for e in self.entries)


_DEFAULT_TABLE = ChannelTable("skel46", _default_channel_entries())

CHANNEL_TABLES = {"skel46": _DEFAULT_TABLE}


@dataclass(frozen=True)
class SkelFrame:
    """One frame of 46 joint angles (degrees)."""

    index: int
    angles: tuple[float, ...]

    def __post_init__(self):
        if self.index < 0:
            raise MalformedRecord(f"frame index {self.index} is negative")
        if len(self.angles) != N_CHANNELS:
            raise WrongDimension(f"frame {self.index} has {len(self.angles)} angles, expected {N_CHANNELS}")
        for a in self.angles:
            if not math.isfinite(a):
                raise NonFiniteValue(f"frame {self.index} contains a non-finite angle")

    def angle(self, table: ChannelTable, segment: str, channel: str) -> float:
        return self.angles[table.index_of(segment, channel)]


@dataclass(frozen=True)
class SkelSequence:
    """A clip's frames plus identity metadata."""

    subject_id: str
    clip_id: str
    label: str
    fps: float
    frames: tuple[SkelFrame, ...]
    channel_table: str = "skel46"

    def __post_init__(self):
        if self.fps <= 0 or not math.isfinite(self.fps):
            raise MalformedRecord(f"fps must be positive and finite, got {self.fps}")
        if len(self.frames) < 1:
            raise EmptySequence(f"clip {self.clip_id!r} has no frames")
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise MalformedRecord(f"clip {self.clip_id!r} frame indices are not strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def angles_matrix(self) -> np.ndarray:
        """T x 46 float64 view of the frames."""
        return np.array([f.angles for f in self.frames], dtype=np.float64)


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame feature matrix V (row t is the frame-t feature vector)."""

    clip_id: str
    values: np.ndarray  # T x D float64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise WrongDimension(f"feature matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"feature matrix for {self.clip_id!r} contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


DEFAULT_CLASSES = (
    "DCM",
    "Myopathic",
    "Abnormal",
    "Cerebral Palsy",
    "Parkinson's",
    "Normal",
    "Style",
    "Exercise",
)

UNLABELED = "unlabeled"


@dataclass(frozen=True)
class Taxonomy:
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if len(self.classes) < 2:
            raise BadLabel("taxonomy needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise BadLabel("taxonomy class names must be unique")

    @property
    def K(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise BadLabel(f"unknown class {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.classes


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    subject_id: str
    label: str
    source: str  # GAVD | DCM | SYNTH
    path: str


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [r.clip_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise MalformedRecord("manifest clip_ids are not unique")

    def __len__(self) -> int:
        return len(self.records)

    def by_clip(self) -> dict[str, ManifestRecord]:
        return {r.clip_id: r for r in self.records}

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def validate_labels(self, taxonomy: Taxonomy) -> None:
        for r in self.records:
            if r.label != UNLABELED and r.label not in taxonomy:
                raise BadLabel(f"clip {r.clip_id!r} has label {r.label!r} not in taxonomy")


# ---------------------------------------------------------------------------
# skeleton sequence files
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("channel_table", "clip_id", "fps", "label", "subject_id")


def _as_text(stream) -> str:
    if isinstance(stream, bytes):
        return stream.decode("utf-8")
    if isinstance(stream, str):
        return stream
    data = stream.read()
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def parse_skeleton_sequence(stream, table: ChannelTable | None = None) -> SkelSequence:
    """Parse the line-delimited sequence format into a validated SkelSequence.

    Accepts bytes, str, or a readable file object. Angles out of their
    channel's declared range are rejected as malformed.
    """
    text = _as_text(stream)
    lines = [ln for ln in text.split("\n") if ln.strip() != ""]
    if not lines:
        raise EmptySequence("empty sequence file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MalformedRecord(f"bad header line: {e}") from None
    if not isinstance(header, dict) or set(header) != set(_HEADER_KEYS):
        raise MalformedRecord(f"header must contain exactly the keys {sorted(_HEADER_KEYS)}")
    if table is None:
        table = CHANNEL_TABLES.get(header["channel_table"], ChannelTable.default())

    frames: list[SkelFrame] = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 1 + N_CHANNELS:
            raise WrongDimension(
                f"frame line has {len(parts) - 1} angles, expected {N_CHANNELS}"
            )
        try:
            idx = int(parts[0])
            angles = tuple(float(p) for p in parts[1:])
        except ValueError:
            raise MalformedRecord(f"non-numeric field in frame line {parts[0]!r}") from None
        for a, spec in zip(angles, table.entries):
            if not math.isfinite(a):
                raise NonFiniteValue(f"frame {idx} contains a non-finite angle")
            if not (spec.lo <= a <= spec.hi):
                raise MalformedRecord(
                    f"frame {idx}: {spec.segment}/{spec.channel}={a} outside [{spec.lo}, {spec.hi}]"
                )
        frames.append(SkelFrame(idx, angles))
    if len(frames) < 2:
        raise EmptySequence("sequence needs at least 2 frames")

    return SkelSequence(
        subject_id=str(header["subject_id"]),
        clip_id=str(header["clip_id"]),
        label=str(header["label"]),
        fps=float(header["fps"]),
        frames=tuple(frames),
        channel_table=str(header["channel_table"]),
    )


def serialize_skeleton_sequence(seq: SkelSequence) -> bytes:
    """Canonical byte form; parse(serialize(seq)) == seq field-for-field."""
    header = {
        "channel_table": seq.channel_table,
        "clip_id": seq.clip_id,
        "fps": seq.fps,
        "label": seq.label,
        "subject_id": seq.subject_id,
    }
    out = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for f in seq.frames:
        out.append(str(f.index) + "," + ",".join(repr(a) for a in f.angles))
    return ("\n".join(out) + "\n").encode("utf-8")


def sample_frames(seq: SkelSequence, T: int) -> SkelSequence:
    """Uniformly resample to exactly T frames.

    Source positions are round(i*(N-1)/(T-1)) for i in 0..T-1 (banker's
    rounding, matching Python round()); sampled frames are renumbered
    0..T-1 so indices stay strictly increasing even when N < T repeats
    source frames. Metadata is preserved.
    """
    if T < 1:
        raise WrongDimension(f"T must be >= 1, got {T}")
    N = len(seq.frames)
    if T == 1:
        picks = [0]
    else:
        picks = [round(i * (N - 1) / (T - 1)) for i in range(T)]
    frames = tuple(
        SkelFrame(i, seq.frames[p].angles) for i, p in enumerate(picks)
    )
    return SkelSequence(
        subject_id=seq.subject_id,
        clip_id=seq.clip_id,
        label=seq.label,
        fps=seq.fps,
        frames=frames,
        channel_table=seq.channel_table,
    )


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def store_feature_sequence(feat: FeatureSequence) -> bytes:
    lines = [f"{feat.T} {feat.D}"]
    for row in feat.values:
        lines.append(" ".join(repr(float(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_feature_sequence(stream, clip_id: str = "") -> FeatureSequence:
    text = _as_text(stream)
    lines = [ln for ln in text.split("\n") if ln.strip() != ""]
    if not lines:
        raise HeaderMismatch("empty feature file")
    head = lines[0].split()
    if len(head) != 2:
        raise HeaderMismatch(f"feature header must be 'T D', got {lines[0]!r}")
    try:
        T, D = int(head[0]), int(head[1])
    except ValueError:
        raise HeaderMismatch(f"non-integer feature header {lines[0]!r}") from None
    body = lines[1:]
    if len(body) != T:
        raise HeaderMismatch(f"expected {T} feature rows, found {len(body)}")
    rows = []
    for ln in body:
        vals = ln.split()
        if len(vals) != D:
            raise HeaderMismatch(f"expected {D} values per row, found {len(vals)}")
        try:
            row = [float(v) for v in vals]
        except ValueError:
            raise HeaderMismatch("non-numeric feature value") from None
        if not all(math.isfinite(v) for v in row):
            raise NonFiniteValue("feature file contains a non-finite value")
        rows.append(row)
    return FeatureSequence(clip_id=clip_id, values=np.array(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def load_manifest(stream) -> Manifest:
    text = _as_text(stream)
    records = []
    for ln in text.split("\n"):
        if ln.strip() == "":
            continue
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"bad manifest line: {e}") from None
        try:
            records.append(
                ManifestRecord(
                    clip_id=str(obj["clip_id"]),
                    subject_id=str(obj["subject_id"]),
                    label=str(obj["label"]),
                    source=str(obj["source"]),
                    path=str(obj["path"]),
                )
            )
        except KeyError as e:
            raise MalformedRecord(f"manifest record missing field {e}") from None
    if not records:
        raise EmptyManifest("manifest has no records")
    return Manifest(tuple(records))


def store_manifest(manifest: Manifest) -> bytes:
    buf = io.StringIO()
    for r in manifest.records:
        buf.write(
            json.dumps(
                {
                    "clip_id": r.clip_id,
                    "subject_id": r.subject_id,
                    "label": r.label,
                    "source": r.source,
                    "path": r.path,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
        buf.write("\n")
    return buf.getvalue().encode("utf-8")
