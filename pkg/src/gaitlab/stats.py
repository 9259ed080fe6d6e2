"""Classification metrics and study statistics.

F1 conventions follow the fixed-column report style: a class that is never
predicted and never present scores 0.0, and macro F1 averages over all K
taxonomy classes whether or not they appear in the evaluated split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Taxonomy
from .errors import BadLabel, EmptyMatrix, EmptyStudy, IncompleteScores, InvalidParams

LIKERT_DIMENSIONS = ("grounding", "explainability", "usefulness", "consistency")
LIKERT_MIN, LIKERT_MAX = 1, 5


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are truth, columns are prediction."""

    taxonomy: Taxonomy
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        k = self.taxonomy.K
        if c.shape != (k, k):
            raise EmptyMatrix(f"confusion matrix must be {k}x{k}, got {c.shape}")
        if (c < 0).any():
            raise EmptyMatrix("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @staticmethod
    def from_predictions(truth, predicted, taxonomy: Taxonomy) -> "ConfusionMatrix":
        if len(truth) != len(predicted):
            raise BadLabel("truth and prediction lists differ in length")
        c = np.zeros((taxonomy.K, taxonomy.K), dtype=np.int64)
        for t, p in zip(truth, predicted):
            c[taxonomy.index(t), taxonomy.index(p)] += 1
        return ConfusionMatrix(taxonomy, c)


def accuracy(cm: ConfusionMatrix) -> float:
    """Percent of clips on the diagonal."""
    if cm.total == 0:
        raise EmptyMatrix("no evaluated clips")
    return float(np.trace(cm.counts)) / cm.total * 100.0


def per_class_f1(cm: ConfusionMatrix) -> list[float]:
    """Percent F1 per class; 0.0 whenever precision+recall is degenerate."""
    if cm.total == 0:
        raise EmptyMatrix("no evaluated clips")
    out = []
    c = cm.counts
    for k in range(cm.taxonomy.K):
        tp = float(c[k, k])
        pred = float(c[:, k].sum())
        true = float(c[k, :].sum())
        precision = tp / pred if pred > 0 else 0.0
        recall = tp / true if true > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(f1 * 100.0)
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1 over all K classes."""
    return float(np.mean(per_class_f1(cm)))


def binomial_test(k: int, n: int, p0: float, alternative: str = "greater") -> float:
    """Exact binomial tail probability via log-space coefficients.

    "greater" returns P(X >= k); "less" returns P(X <= k).
    """
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise InvalidParams("k and n must be integers")
    if not (0 <= k <= n) or n < 1:
        raise InvalidParams(f"need 0 <= k <= n with n >= 1, got k={k}, n={n}")
    if not (0.0 < p0 < 1.0):
        raise InvalidParams(f"p0 must be in (0, 1), got {p0}")
    if alternative not in ("greater", "less"):
        raise InvalidParams(f"alternative must be 'greater' or 'less', got {alternative!r}")

    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    lgn = math.lgamma(n + 1)
    q0 = 1.0 - p0

    def pmf(i: int) -> float:
        # log-space coefficient, direct probability powers; the coefficient
        # exponent is exactly 0 at the boundary so e.g. P(X >= n) == p0**n
        coeff = math.exp(lgn - math.lgamma(i + 1) - math.lgamma(n - i + 1))
        a, b = p0**i, q0 ** (n - i)
        if a > 0.0 and b > 0.0 and math.isfinite(coeff):
            return coeff * a * b
        return math.exp(
            lgn - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * log_p + (n - i) * log_q
        )

    if alternative == "greater":
        terms = [pmf(i) for i in range(k, n + 1)]
    else:
        terms = [pmf(i) for i in range(0, k + 1)]
    return min(1.0, math.fsum(terms))


# ---------------------------------------------------------------------------
# Likert study records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LikertRecord:
    """One rater's blinded assessment of one case, stored de-blinded."""

    rater_id: str
    case_id: str
    scores: dict[str, dict[str, int]]  # model -> dimension -> 1..5
    best_model: str
    comment: str = ""

    def __post_init__(self):
        if not self.scores:
            raise IncompleteScores("record has no model scores")
        for model, dims in self.scores.items():
            missing = [d for d in LIKERT_DIMENSIONS if d not in dims]
            if missing:
                raise IncompleteScores(f"model {model!r} missing dimensions {missing}")
            for d, v in dims.items():
                if d not in LIKERT_DIMENSIONS:
                    raise IncompleteScores(f"unknown dimension {d!r}")
                if not (LIKERT_MIN <= v <= LIKERT_MAX and int(v) == v):
                    raise IncompleteScores(f"score {v!r} for {model}/{d} outside {LIKERT_MIN}..{LIKERT_MAX}")
        if self.best_model not in self.scores:
            raise IncompleteScores(f"best-model pick {self.best_model!r} not among scored models")


@dataclass(frozen=True)
class LikertSummary:
    models: tuple[str, ...]
    means: dict[str, dict[str, float]]       # model -> dimension -> mean
    preference_counts: dict[str, int]        # model -> best-pick count
    n_records: int


def likert_summary(records) -> LikertSummary:
    """Per-(model, dimension) arithmetic means and best-pick counts."""
    records = list(records)
    if not records:
        raise EmptyStudy("no ratings recorded")
    models: list[str] = []
    for r in records:
        for m in r.scores:
            if m not in models:
                models.append(m)
    sums: dict[str, dict[str, float]] = {m: {d: 0.0 for d in LIKERT_DIMENSIONS} for m in models}
    counts: dict[str, int] = {m: 0 for m in models}
    prefs: dict[str, int] = {m: 0 for m in models}
    for r in records:
        for m, dims in r.scores.items():
            counts[m] += 1
            for d in LIKERT_DIMENSIONS:
                sums[m][d] += dims[d]
        prefs[r.best_model] += 1
    means = {
        m: {d: sums[m][d] / counts[m] for d in LIKERT_DIMENSIONS}
        for m in models
        if counts[m] > 0
    }
    return LikertSummary(
        models=tuple(models),
        means=means,
        preference_counts=prefs,
        n_records=len(records),
    )
