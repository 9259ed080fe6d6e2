"""Gait-event detection and the clinical metrics cited in rationale text.

Geometry convention: sagittal plane, hip at the origin, x forward and y
down (depth). Joint angles are degrees measured from the vertical; knee
flexion rotates the shank backward relative to the thigh, ankle
dorsiflexion lifts the toe relative to the foot-flat axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .core import ChannelTable, SkelFrame, SkelSequence, Taxonomy
from .errors import DegenerateTiming, MissingChannel, TooShort, UnknownClass
from .tokenizer import format_angle

SMOOTH_WINDOW = 5
PEAK_PROMINENCE_FRAC = 0.10
ASYMMETRY_SIGNIFICANT_PCT = 5.0


@dataclass(frozen=True)
class SegmentLengths:
    """Canonical segment lengths in meters; absolute scale cancels in metrics."""

    thigh: float = 0.45
    shank: float = 0.43
    foot: float = 0.20
    pelvis_height: float = 1.0

    def __post_init__(self):
        for name in ("thigh", "shank", "foot", "pelvis_height"):
            if getattr(self, name) <= 0:
                raise DegenerateTiming(f"segment length {name} must be positive")


@dataclass(frozen=True)
class SidePositions:
    knee: tuple[float, float]
    ankle: tuple[float, float]
    toe: tuple[float, float]


@dataclass(frozen=True)
class GaitEvents:
    heel_strikes_left: tuple[int, ...]
    heel_strikes_right: tuple[int, ...]
    toe_offs_left: tuple[int, ...]
    toe_offs_right: tuple[int, ...]

    def __post_init__(self):
        for name in ("heel_strikes_left", "heel_strikes_right", "toe_offs_left", "toe_offs_right"):
            seq = getattr(self, name)
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise DegenerateTiming(f"{name} is not strictly increasing")
        for strikes, offs, side in (
            (self.heel_strikes_left, self.toe_offs_left, "left"),
            (self.heel_strikes_right, self.toe_offs_right, "right"),
        ):
            merged = sorted([(t, "strike") for t in strikes] + [(t, "toeoff") for t in offs])
            for (_, a), (_, b) in zip(merged, merged[1:]):
                if a == b:
                    raise DegenerateTiming(f"{side} events do not alternate strike/toe-off")


@dataclass(frozen=True)
class GaitMetrics:
    cadence: float
    step_time_left: float
    step_time_right: float
    double_support_pct: float  # canonical form; seconds carried alongside
    swing_pct_left: float
    swing_pct_right: float
    asymmetry_index: float
    n_steps: int
    toe_offs_left: int = 0
    toe_offs_right: int = 0
    double_support_s: float = 0.0

    def __post_init__(self):
        if self.cadence < 0:
            raise DegenerateTiming("cadence must be >= 0")
        for name in ("swing_pct_left", "swing_pct_right", "double_support_pct"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise DegenerateTiming(f"{name}={v} outside [0, 100]")
        if self.asymmetry_index < 0:
            raise DegenerateTiming("asymmetry_index must be >= 0")


_SIDE_CHANNELS = {
    "left": (("L.Hip", "flex"), ("L.Knee", "flex"), ("L.Ankle", "dorsiflex")),
    "right": (("R.Hip", "flex"), ("R.Knee", "flex"), ("R.Ankle", "dorsiflex")),
}


def forward_kinematics_sagittal(
    frame: SkelFrame,
    lengths: SegmentLengths = SegmentLengths(),
    table: ChannelTable | None = None,
) -> dict[str, SidePositions]:
    """Planar hip->knee->ankle->toe chain per side.

    With all angles zero the ankle sits directly below the hip at depth
    thigh+shank and the toe points forward by the foot length.
    """
    table = table or ChannelTable.default()
    out: dict[str, SidePositions] = {}
    for side, channels in _SIDE_CHANNELS.items():
        angles = []
        for segment, channel in channels:
            if not table.has(segment, channel):
                raise MissingChannel(f"channel ({segment}, {channel}) missing from table {table.name!r}")
            angles.append(frame.angle(table, segment, channel))
        hip, knee, ankle = (math.radians(a) for a in angles)
        phi_thigh = hip
        phi_shank = hip - knee
        phi_foot = phi_shank + math.pi / 2 + ankle
        kx = lengths.thigh * math.sin(phi_thigh)
        ky = lengths.thigh * math.cos(phi_thigh)
        ax = kx + lengths.shank * math.sin(phi_shank)
        ay = ky + lengths.shank * math.cos(phi_shank)
        tx = ax + lengths.foot * math.sin(phi_foot)
        ty = ay + lengths.foot * math.cos(phi_foot)
        out[side] = SidePositions(knee=(kx, ky), ankle=(ax, ay), toe=(tx, ty))
    return out


def _ankle_forward_tracks(seq: SkelSequence, lengths: SegmentLengths, table: ChannelTable):
    """Per-side forward ankle excursion relative to the pelvis, vectorized."""
    table = table or ChannelTable.default()
    mat = seq.angles_matrix()
    tracks = {}
    for side, channels in _SIDE_CHANNELS.items():
        idx = []
        for segment, channel in channels:
            if not table.has(segment, channel):
                raise MissingChannel(f"channel ({segment}, {channel}) missing from table {table.name!r}")
            idx.append(table.index_of(segment, channel))
        hip = np.radians(mat[:, idx[0]])
        knee = np.radians(mat[:, idx[1]])
        tracks[side] = lengths.thigh * np.sin(hip) + lengths.shank * np.sin(hip - knee)
    return tracks


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    out = np.empty_like(x)
    n = len(x)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        out[i] = x[lo:hi].mean()
    return out


def _alternating_extrema(xs: np.ndarray, prominence: float):
    """Prominence-filtered maxima/minima forced into strict alternation."""
    maxima, _ = find_peaks(xs, prominence=prominence)
    minima, _ = find_peaks(-xs, prominence=prominence)
    events = sorted([(int(i), 1) for i in maxima] + [(int(i), -1) for i in minima])
    merged: list[tuple[int, int]] = []
    for i, typ in events:
        if merged and merged[-1][1] == typ:
            j = merged[-1][0]
            keep = i if (xs[i] - xs[j]) * typ > 0 else j
            merged[-1] = (keep, typ)
        else:
            merged.append((i, typ))
    strikes = tuple(i for i, t in merged if t == 1)
    offs = tuple(i for i, t in merged if t == -1)
    return strikes, offs


def detect_gait_events(
    seq: SkelSequence,
    lengths: SegmentLengths = SegmentLengths(),
    table: ChannelTable | None = None,
) -> GaitEvents:
    """Heel strikes at forward-excursion maxima, toe-offs at minima.

    The forward ankle track is smoothed with a centered moving average
    (window 5) and extrema must have prominence >= 10% of the track range.
    """
    table = table or ChannelTable.default()
    tracks = _ankle_forward_tracks(seq, lengths, table)
    per_side = {}
    for side, x in tracks.items():
        xs = _moving_average(x, SMOOTH_WINDOW)
        rng = float(xs.max() - xs.min())
        if rng <= 0.0:
            per_side[side] = ((), ())
            continue
        per_side[side] = _alternating_extrema(xs, PEAK_PROMINENCE_FRAC * rng)
    for side in ("left", "right"):
        if len(per_side[side][0]) < 3:
            raise TooShort(f"fewer than 3 heel strikes detected on the {side} side")
    return GaitEvents(
        heel_strikes_left=per_side["left"][0],
        heel_strikes_right=per_side["right"][0],
        toe_offs_left=per_side["left"][1],
        toe_offs_right=per_side["right"][1],
    )


def _stance_intervals(strikes, offs):
    intervals = []
    for s in strikes:
        nxt = [o for o in offs if o > s]
        if nxt:
            intervals.append((s, nxt[0]))
    return intervals


def _overlap_pieces(left_iv, right_iv):
    pieces = []
    for a0, a1 in left_iv:
        for b0, b1 in right_iv:
            lo, hi = max(a0, b0), min(a1, b1)
            if hi > lo:
                pieces.append((lo, hi))
    return pieces


def compute_metrics(events: GaitEvents, fps: float) -> GaitMetrics:
    """Timing metrics from detected events; all durations in seconds via fps."""
    if fps <= 0:
        raise DegenerateTiming(f"fps must be positive, got {fps}")
    ls, rs = events.heel_strikes_left, events.heel_strikes_right
    if len(ls) < 3 or len(rs) < 3:
        raise TooShort("need >= 3 heel strikes per side")

    merged = sorted([(t, "L") for t in ls] + [(t, "R") for t in rs])
    all_t = [t for t, _ in merged]
    elapsed = (all_t[-1] - all_t[0]) / fps
    if elapsed <= 0:
        raise DegenerateTiming("non-positive elapsed time between first and last strike")
    n_strikes = len(all_t)
    cadence = 60.0 * (n_strikes - 1) / elapsed

    left_steps = []  # ends at a left strike
    right_steps = []
    for (t0, s0), (t1, s1) in zip(merged, merged[1:]):
        if s0 == "R" and s1 == "L":
            left_steps.append((t1 - t0) / fps)
        elif s0 == "L" and s1 == "R":
            right_steps.append((t1 - t0) / fps)
    if not left_steps or not right_steps:
        raise DegenerateTiming("strikes never alternate between sides")
    step_l = float(np.mean(left_steps))
    step_r = float(np.mean(right_steps))
    asym = abs(step_l - step_r) / (0.5 * (step_l + step_r)) * 100.0

    def swing_pct(strikes, offs):
        vals = []
        for o in offs:
            prev = [s for s in strikes if s < o]
            nxt = [s for s in strikes if s > o]
            if prev and nxt:
                cycle = nxt[0] - prev[-1]
                if cycle <= 0:
                    raise DegenerateTiming("non-positive cycle duration")
                vals.append((nxt[0] - o) / cycle * 100.0)
        return float(np.mean(vals)) if vals else 0.0

    swing_l = swing_pct(ls, events.toe_offs_left)
    swing_r = swing_pct(rs, events.toe_offs_right)

    left_iv = _stance_intervals(ls, events.toe_offs_left)
    right_iv = _stance_intervals(rs, events.toe_offs_right)
    pieces = _overlap_pieces(left_iv, right_iv)
    ds_vals = []
    ds_secs = []
    for strikes in (ls, rs):
        for c0, c1 in zip(strikes, strikes[1:]):
            dur = c1 - c0
            if dur <= 0:
                raise DegenerateTiming("non-positive cycle duration")
            inside = sum(max(0, min(c1, hi) - max(c0, lo)) for lo, hi in pieces)
            ds_vals.append(min(100.0, inside / dur * 100.0))
            ds_secs.append(inside / fps)
    ds = float(np.mean(ds_vals)) if ds_vals else 0.0

    return GaitMetrics(
        cadence=cadence,
        step_time_left=step_l,
        step_time_right=step_r,
        double_support_pct=ds,
        double_support_s=float(np.mean(ds_secs)) if ds_secs else 0.0,
        swing_pct_left=swing_l,
        swing_pct_right=swing_r,
        asymmetry_index=asym,
        n_steps=n_strikes - 1,
        toe_offs_left=len(events.toe_offs_left),
        toe_offs_right=len(events.toe_offs_right),
    )


def render_rationale(metrics: GaitMetrics, predicted_class: str, taxonomy: Taxonomy) -> str:
    """Fixed-template paragraph grounding the class call in the metrics."""
    if predicted_class not in taxonomy:
        raise UnknownClass(f"class {predicted_class!r} not in taxonomy")
    f2 = lambda v: format_angle(v, 2)
    f1 = lambda v: format_angle(v, 1)

    if metrics.asymmetry_index < ASYMMETRY_SIGNIFICANT_PCT:
        asym_clause = (
            f"step timing shows no significant asymmetry between sides "
            f"(asymmetry index {f1(metrics.asymmetry_index)}%)"
        )
    else:
        short_side = "left" if metrics.step_time_left < metrics.step_time_right else "right"
        lo = min(metrics.step_time_left, metrics.step_time_right)
        hi = max(metrics.step_time_left, metrics.step_time_right)
        asym_clause = (
            f"the {short_side} step time is significantly shorter ({f2(lo)}s vs. {f2(hi)}s; "
            f"asymmetry index {f1(metrics.asymmetry_index)}%)"
        )

    if metrics.toe_offs_left == metrics.toe_offs_right:
        toe_clause = f"Toe-off counts are balanced across sides ({metrics.toe_offs_left} each)."
    else:
        hi_side = "right" if metrics.toe_offs_right > metrics.toe_offs_left else "left"
        lo_side = "left" if hi_side == "right" else "right"
        hi_n = max(metrics.toe_offs_left, metrics.toe_offs_right)
        lo_n = min(metrics.toe_offs_left, metrics.toe_offs_right)
        toe_clause = (
            f"More toe-offs were detected on the {hi_side} side ({hi_n}) "
            f"compared to the {lo_side} ({lo_n})."
        )

    return (
        f"Predicted gait class: {predicted_class}. "
        f"Observed cadence is {f2(metrics.cadence)} steps per minute across "
        f"{metrics.n_steps} detected steps. "
        f"Mean step time is {f2(metrics.step_time_left)} s on the left and "
        f"{f2(metrics.step_time_right)} s on the right; {asym_clause}. "
        f"Double support occupies {f1(metrics.double_support_pct)}% of the gait cycle, "
        f"with swing phases of {f1(metrics.swing_pct_left)}% (left) and "
        f"{f1(metrics.swing_pct_right)}% (right). "
        f"{toe_clause}"
    )
