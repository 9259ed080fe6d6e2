from __future__ import annotations

import numpy as np
import pytest

from gaitlab.core import ChannelTable, SkelFrame, SkelSequence
from gaitlab.datasets import DEFAULT_SYNTH_SPEC, generate_synthetic_cohort

COHORT_SEED = 11


@pytest.fixture(scope="session")
def synth_cohort(tmp_path_factory):
    """Default 8-class synthetic cohort shared by dataset/training tests."""
    out_dir = tmp_path_factory.mktemp("cohort")
    manifest, truths = generate_synthetic_cohort(DEFAULT_SYNTH_SPEC, COHORT_SEED, str(out_dir))
    return manifest, truths, str(out_dir)


@pytest.fixture()
def table() -> ChannelTable:
    return ChannelTable.default()


def make_sequence(angles_rows, fps=30.0, clip_id="clip", subject_id="subj", label="unlabeled"):
    frames = tuple(SkelFrame(i, tuple(float(a) for a in row)) for i, row in enumerate(angles_rows))
    return SkelSequence(
        subject_id=subject_id, clip_id=clip_id, label=label, fps=fps, frames=frames
    )


def frame_with(table: ChannelTable, values: dict, index: int = 0) -> SkelFrame:
    angles = np.zeros(46)
    for (seg, chan), v in values.items():
        angles[table.index_of(seg, chan)] = v
    return SkelFrame(index, tuple(float(a) for a in angles))
