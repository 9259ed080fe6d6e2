"""Blinded expert study backend: assignment, blinding, rating capture, summary.

Model identities live only inside the study object and the server-side
store; anything which can reach a rater (the BlindedCase payloads) carries
opaque labels A/B/C. Ratings are de-blinded at submission time and appended
to a line-delimited store that is never rewritten.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass

from .errors import (
    DuplicateRating,
    EmptyStudy,
    IncompleteScores,
    MissingRationale,
    NoRaters,
    StudyComplete,
    UnknownRater,
    WrongCase,
)
from .stats import (
    LIKERT_DIMENSIONS,
    LIKERT_MAX,
    LIKERT_MIN,
    LikertRecord,
    LikertSummary,
    binomial_test,
    likert_summary,
)
from .util import rng_for

_LABEL_ALPHABET = "ABCDEFGHIJ"


@dataclass(frozen=True)
class ReviewCase:
    case_id: str
    preview: str
    rationales: dict[str, str]  # true model name -> rationale text


@dataclass(frozen=True)
class ReviewStudy:
    cases: tuple[ReviewCase, ...]
    models: tuple[str, ...]
    raters: tuple[str, ...]
    assignment: dict[str, tuple[str, ...]]   # rater -> ordered case ids
    blinding: dict[str, tuple[str, ...]]     # case id -> model shown under label i
    seed: int

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(_LABEL_ALPHABET[: len(self.models)])

    def case(self, case_id: str) -> ReviewCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise WrongCase(f"unknown case {case_id!r}")


def create_study(cases, models, raters, seed: int) -> ReviewStudy:
    """Seeded assignment and per-case blinding permutations.

    Cases are shuffled once by seed, then dealt round-robin so rater subsets
    are disjoint and equal up to one case. Each case's model->label mapping
    is an independent uniform permutation keyed by hash(seed, case id).
    """
    cases = tuple(cases)
    models = tuple(models)
    raters = tuple(raters)
    if not raters:
        raise NoRaters("study needs at least one rater")
    if len(models) < 2:
        raise MissingRationale("study needs at least two models to compare")
    if len(models) > len(_LABEL_ALPHABET):
        raise MissingRationale(f"at most {len(_LABEL_ALPHABET)} models supported")
    for c in cases:
        missing = [m for m in models if m not in c.rationales]
        if missing:
            raise MissingRationale(f"case {c.case_id!r} lacks rationales for {missing}")

    order = list(range(len(cases)))
    rng = rng_for("study-assignment", seed)
    rng.shuffle(order)
    assignment: dict[str, list[str]] = {r: [] for r in raters}
    for i, idx in enumerate(order):
        assignment[raters[i % len(raters)]].append(cases[idx].case_id)

    blinding: dict[str, tuple[str, ...]] = {}
    for c in cases:
        perm = rng_for("study-blinding", seed, c.case_id).permutation(len(models))
        blinding[c.case_id] = tuple(models[int(i)] for i in perm)

    return ReviewStudy(
        cases=cases,
        models=models,
        raters=raters,
        assignment={r: tuple(v) for r, v in assignment.items()},
        blinding=blinding,
        seed=seed,
    )


class RatingStore:
    """Append-only line-delimited rating log with an in-memory (rater, case) index.

    Appends are serialized through a lock so a concurrent duplicate submission
    for the same key deterministically loses.
    """

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._records: list[LikertRecord] = []
        self._index: set[tuple[str, str]] = set()
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for ln in fh:
                    if ln.strip():
                        rec = _record_from_json(json.loads(ln))
                        self._records.append(rec)
                        self._index.add((rec.rater_id, rec.case_id))

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[LikertRecord]:
        with self._lock:
            return list(self._records)

    def has(self, rater_id: str, case_id: str) -> bool:
        with self._lock:
            return (rater_id, case_id) in self._index

    def rated_by(self, rater_id: str) -> set[str]:
        with self._lock:
            return {c for r, c in self._index if r == rater_id}

    def append(self, record: LikertRecord) -> None:
        with self._lock:
            key = (record.rater_id, record.case_id)
            if key in self._index:
                raise DuplicateRating(f"rating for {key} already recorded")
            line = json.dumps(_record_to_json(record), sort_keys=True) + "\n"
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._records.append(record)
            self._index.add(key)


def _record_to_json(rec: LikertRecord) -> dict:
    return {
        "rater": rec.rater_id,
        "case": rec.case_id,
        "scores": rec.scores,
        "best_model": rec.best_model,
        "comment": rec.comment,
        "ts": time.time(),
    }


def _record_from_json(obj: dict) -> LikertRecord:
    return LikertRecord(
        rater_id=obj["rater"],
        case_id=obj["case"],
        scores={m: dict(d) for m, d in obj["scores"].items()},
        best_model=obj["best_model"],
        comment=obj.get("comment", ""),
    )


def _progress(study: ReviewStudy, store: RatingStore, rater_id: str) -> dict:
    assigned = study.assignment.get(rater_id, ())
    rated = store.rated_by(rater_id)
    return {"rated": len([c for c in assigned if c in rated]), "assigned": len(assigned)}


def next_case(study: ReviewStudy, store: RatingStore, rater_id: str) -> dict:
    """Lowest-ordinal unrated case for the rater, as a blinded payload."""
    if rater_id not in study.assignment:
        raise UnknownRater(f"rater {rater_id!r} is not part of this study")
    rated = store.rated_by(rater_id)
    for case_id in study.assignment[rater_id]:
        if case_id not in rated:
            case = study.case(case_id)
            perm = study.blinding[case_id]
            panels = [
                {"label": label, "rationale": case.rationales[model]}
                for label, model in zip(study.labels, perm)
            ]
            return {
                "case_id": case_id,
                "preview": case.preview,
                "panels": panels,
                "dimensions": list(LIKERT_DIMENSIONS),
                "scale": {"min": LIKERT_MIN, "max": LIKERT_MAX},
                "progress": _progress(study, store, rater_id),
            }
    raise StudyComplete(f"rater {rater_id!r} has rated every assigned case")


def submit_rating(
    study: ReviewStudy,
    store: RatingStore,
    rater_id: str,
    case_id: str,
    label_scores: dict[str, dict[str, int]],
    best_label: str,
    comment: str = "",
) -> dict:
    """Validate, de-blind (labels -> true models), and append atomically."""
    if rater_id not in study.assignment:
        raise UnknownRater(f"rater {rater_id!r} is not part of this study")
    if case_id not in study.assignment[rater_id]:
        raise WrongCase(f"case {case_id!r} is not assigned to rater {rater_id!r}")
    rated = store.rated_by(rater_id)
    current = next((c for c in study.assignment[rater_id] if c not in rated), None)
    if current is None:
        raise DuplicateRating(f"rater {rater_id!r} already finished the study")
    if case_id != current:
        if case_id in rated:
            raise DuplicateRating(f"case {case_id!r} was already rated by {rater_id!r}")
        raise WrongCase(f"case {case_id!r} is not the rater's current case ({current!r})")

    labels = study.labels
    missing = [lab for lab in labels if lab not in label_scores]
    if missing:
        raise IncompleteScores(f"missing scores for labels {missing}")
    extra = [lab for lab in label_scores if lab not in labels]
    if extra:
        raise IncompleteScores(f"unknown labels {extra}")
    if best_label not in labels:
        raise IncompleteScores(f"best pick {best_label!r} is not one of {list(labels)}")
    for lab, dims in label_scores.items():
        for d in LIKERT_DIMENSIONS:
            v = dims.get(d)
            if not isinstance(v, int) or not (LIKERT_MIN <= v <= LIKERT_MAX):
                raise IncompleteScores(f"label {lab}: dimension {d!r} needs an integer in 1..5, got {v!r}")

    perm = study.blinding[case_id]
    model_of = dict(zip(labels, perm))
    record = LikertRecord(
        rater_id=rater_id,
        case_id=case_id,
        scores={model_of[lab]: {d: int(label_scores[lab][d]) for d in LIKERT_DIMENSIONS} for lab in labels},
        best_model=model_of[best_label],
        comment=comment,
    )
    store.append(record)
    return {"ok": True, "progress": _progress(study, store, rater_id)}


@dataclass(frozen=True)
class StudySummary:
    likert: LikertSummary
    preferred_model: str
    preference_count: int
    preference_share: float
    p_value: float
    rated: int
    total_cases: int


def study_summary(study: ReviewStudy, store: RatingStore, null_p: float | None = None) -> StudySummary:
    """Aggregate the de-blinded store; p-value tests the top model's picks.

    The null preference probability defaults to 1/len(models) (1/3 for the
    standard three-arm protocol); one-sided exact binomial.
    """
    records = store.records()
    if not records:
        raise EmptyStudy("no ratings submitted yet")
    summary = likert_summary(records)
    prefs = {m: summary.preference_counts.get(m, 0) for m in study.models}
    top = max(study.models, key=lambda m: prefs[m])
    k = prefs[top]
    n = len(records)
    p0 = null_p if null_p is not None else 1.0 / len(study.models)
    return StudySummary(
        likert=summary,
        preferred_model=top,
        preference_count=k,
        preference_share=k / n * 100.0,
        p_value=binomial_test(k, n, p0, alternative="greater"),
        rated=n,
        total_cases=len(study.cases),
    )


def summary_to_json(s: StudySummary, study: ReviewStudy, anonymize: bool) -> dict:
    """JSON form; with anonymize=True model names become ordinal aliases."""
    if anonymize:
        alias = {m: f"model_{i + 1}" for i, m in enumerate(study.models)}
    else:
        alias = {m: m for m in study.models}
    means = {alias[m]: dict(dims) for m, dims in s.likert.means.items() if m in alias}
    prefs = {alias[m]: s.likert.preference_counts.get(m, 0) for m in study.models}
    return {
        "means": means,
        "preference_counts": prefs,
        "preferred": alias[s.preferred_model],
        "preference_share_pct": s.preference_share,
        "p_value": s.p_value,
        "rated": s.rated,
        "total_cases": s.total_cases,
    }


# ---------------------------------------------------------------------------
# study directory layout
# ---------------------------------------------------------------------------

STUDY_FILE = "study.json"
RATINGS_FILE = "ratings.jsonl"


def load_study_dir(study_dir: str) -> tuple[ReviewStudy, RatingStore]:
    """Study definition from study.json; assignment/blinding derive from its seed."""
    with open(os.path.join(study_dir, STUDY_FILE), "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    cases = [
        ReviewCase(case_id=c["case_id"], preview=c.get("preview", ""), rationales=dict(c["rationales"]))
        for c in obj["cases"]
    ]
    study = create_study(cases, obj["models"], obj["raters"], int(obj["seed"]))
    store = RatingStore(os.path.join(study_dir, RATINGS_FILE))
    return study, store


def store_study_file(study_dir: str, cases, models, raters, seed: int) -> None:
    os.makedirs(study_dir, exist_ok=True)
    obj = {
        "seed": seed,
        "models": list(models),
        "raters": list(raters),
        "cases": [
            {"case_id": c.case_id, "preview": c.preview, "rationales": dict(c.rationales)}
            for c in cases
        ],
    }
    with open(os.path.join(study_dir, STUDY_FILE), "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
