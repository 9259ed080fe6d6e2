"""Biomechanical tokenization: skeleton frames rendered as structured text.

Each frame becomes one line of ``Frame <t>: [<Segment>] <chan>=<value>° ...``
with fixed-point values (round-half-to-even, locale independent). Lines are
concatenated, prefixed with a clinical instruction block, and budgeted by a
whitespace token count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ChannelTable, SkelFrame, SkelSequence, Taxonomy
from .errors import MissingClassDefinition, UnknownChannel

DEFAULT_MAX_TOKENS = 1024

# 12 clinically prominent channels; 32 frames of these fit the default
# token budget without frame loss.
DEFAULT_CHANNEL_SUBSET: tuple[tuple[str, str], ...] = (
    ("Pelvis", "tilt"),
    ("Pelvis", "list"),
    ("Pelvis", "rotation"),
    ("L.Hip", "flex"),
    ("R.Hip", "flex"),
    ("L.Knee", "flex"),
    ("R.Knee", "flex"),
    ("L.Ankle", "dorsiflex"),
    ("R.Ankle", "dorsiflex"),
    ("Lumbar", "flex"),
    ("Thorax", "flex"),
    ("L.Shoulder", "flex"),
)

DEFAULT_INSTRUCTION = (
    "You are a clinical gait analyst. Classify the walking pattern described "
    "by the per-frame joint angles below into exactly one gait class."
)

# One kinematic descriptor per taxonomy class, rendered as definition lines
# after the instruction preamble.
DEFAULT_CLASS_DEFINITIONS: dict[str, str] = {
    "DCM": "spastic, unsteady steps with reduced knee excursion and mild timing asymmetry",
    "Myopathic": "waddling gait with pronounced lateral pelvis sway from proximal weakness",
    "Abnormal": "irregular, poorly coordinated stepping without a single localizing pattern",
    "Cerebral Palsy": "crouched posture with persistent knee and hip flexion through stance",
    "Parkinson's": "shuffling steps, reduced arm swing",
    "Normal": "smooth, symmetric stepping with typical joint excursions",
    "Style": "exaggerated, deliberate stepping with large arm and hip excursions",
    "Exercise": "brisk, high-cadence stepping with athletic joint excursions",
}


@dataclass(frozen=True)
class TokenizerConfig:
    channel_subset: tuple[tuple[str, str], ...] = DEFAULT_CHANNEL_SUBSET
    decimals: int = 1
    max_tokens: int = DEFAULT_MAX_TOKENS
    instruction_text: str = DEFAULT_INSTRUCTION
    class_definitions: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_DEFINITIONS)
    )

    def __post_init__(self):
        if self.decimals < 0:
            raise UnknownChannel(f"decimals must be >= 0, got {self.decimals}")
        if self.max_tokens < 1:
            raise UnknownChannel(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class BioText:
    """Rendered frame lines plus the truncated token stream."""

    lines: tuple[str, ...]
    tokens: tuple[str, ...]
    token_count: int

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


def format_angle(value: float, decimals: int) -> str:
    # Fixed-point with round-half-to-even on the exact binary value; this is
    # what str.format does, and it is locale independent.
    return f"{value:.{decimals}f}"


def render_frame(frame: SkelFrame, table: ChannelTable, cfg: TokenizerConfig) -> str:
    """One text line per frame, segments grouped in channel_subset order."""
    parts: list[str] = [f"Frame {frame.index}:"]
    current_segment = None
    for segment, channel in cfg.channel_subset:
        try:
            idx = table.index_of(segment, channel)
        except KeyError:
            raise UnknownChannel(f"channel ({segment}, {channel}) not in table {table.name!r}") from None
        if segment != current_segment:
            parts.append(f"[{segment}]")
            current_segment = segment
        parts.append(f"{channel}={format_angle(frame.angles[idx], cfg.decimals)}°")
    return " ".join(parts)


def tokenize_and_truncate(text: str, max_tokens: int) -> list[str]:
    """Whitespace tokens, first max_tokens kept; never splits inside a token."""
    return text.split()[:max_tokens]


def render_sequence(seq: SkelSequence, table: ChannelTable, cfg: TokenizerConfig) -> BioText:
    """Render every frame, then enforce the token budget.

    If the full rendering exceeds max_tokens, frames are first uniformly
    subsampled to an estimated fitting count, then the token stream is hard
    truncated as a backstop.
    """
    lines = [render_frame(f, table, cfg) for f in seq.frames]
    all_tokens = "\n".join(lines).split()
    if len(all_tokens) > cfg.max_tokens and len(lines) > 1:
        per_line = max(1, -(-len(all_tokens) // len(lines)))  # ceil mean
        keep = max(1, min(len(lines), cfg.max_tokens // per_line))
        if keep < len(lines):
            step = (len(lines) - 1) / (keep - 1) if keep > 1 else 0.0
            picks = sorted({round(i * step) for i in range(keep)})
            lines = [lines[p] for p in picks]
    tokens = tokenize_and_truncate("\n".join(lines), cfg.max_tokens)
    return BioText(lines=tuple(lines), tokens=tuple(tokens), token_count=len(tokens))


def definition_lines(taxonomy: Taxonomy, cfg: TokenizerConfig) -> list[str]:
    lines = []
    for name in taxonomy.classes:
        if name not in cfg.class_definitions:
            raise MissingClassDefinition(f"no definition line for class {name!r}")
        lines.append(f"- {name}: {cfg.class_definitions[name]}")
    return lines


def assemble_prompt(bio: BioText, taxonomy: Taxonomy, cfg: TokenizerConfig) -> str:
    """Instruction preamble, one definition line per class, then the frame lines."""
    sections = [cfg.instruction_text]
    sections.extend(definition_lines(taxonomy, cfg))
    if bio.lines:
        sections.append(bio.text)
    return "\n".join(sections)
