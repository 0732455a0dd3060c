"""Multiclass AUC, Badcase@5 and score discretisation."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import LabeledPair

TEXT = "text"
FORMULA = "formula"

STRONG_THRESHOLD = 0.85
WEAK_THRESHOLD = 0.35


class UndefinedMetricError(ValueError):
    """No query has an ordered label pair, so the AUC is undefined."""


@dataclass
class QueryGroup:
    query: str
    doc_ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    def ranked(self) -> np.ndarray:
        """Indices by descending score, ties by ascending doc id."""
        return np.lexsort((self.doc_ids, -self.scores))


def group_pairs(pairs: Sequence[LabeledPair], scores: Sequence[float]) -> list[QueryGroup]:
    """Group scored pairs by query text, in first-seen order."""
    buckets: dict[str, list[int]] = {}
    for i, p in enumerate(pairs):
        buckets.setdefault(p.query.text, []).append(i)
    scores = np.asarray(scores, dtype=np.float64)
    return [
        QueryGroup(
            q,
            np.array([pairs[i].doc_id for i in idx], dtype=np.int64),
            np.array([pairs[i].y for i in idx]),
            scores[idx],
        )
        for q, idx in buckets.items()
    ]


def concordance_counts(labels: np.ndarray, scores: np.ndarray) -> tuple[int, int]:
    """(concordant, ordered) label pairs; ties in score are never concordant."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    ordered = labels[:, None] > labels[None, :]
    concordant = ordered & (scores[:, None] > scores[None, :])
    return int(concordant.sum()), int(ordered.sum())


def query_concordance(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """Fraction of label-ordered pairs whose scores are strictly ordered the same way."""
    num, den = concordance_counts(labels, scores)
    return None if den == 0 else num / den


def auc_details(groups: Sequence[QueryGroup]) -> tuple[float, int, int]:
    """(AUC, queries used, queries excluded for lacking an ordered label pair).

    The mean is accumulated in exact rationals so the result is the correctly
    rounded value, independent of query order.
    """
    total = Fraction(0)
    used = excluded = 0
    for g in groups:
        num, den = concordance_counts(g.labels, g.scores)
        if den == 0:
            excluded += 1
        else:
            total += Fraction(num, den)
            used += 1
    if not used:
        raise UndefinedMetricError("no query has two documents with different labels")
    return float(total / used), used, excluded


def multiclass_auc(groups: Sequence[QueryGroup]) -> float:
    return auc_details(groups)[0]


def badcase_at_5(groups: Sequence[QueryGroup], mode: str = TEXT, k: int = 5) -> float:
    """Share of queries whose top-k results are bad.

    ``text``: some top-k document is irrelevant.  ``formula``: the top-k label
    sum is zero, i.e. every top-k document is irrelevant.
    """
    if mode not in (TEXT, FORMULA):
        raise ValueError(f"unknown badcase mode {mode!r}")
    if not groups:
        return 0.0
    bad = 0
    for g in groups:
        top = g.labels[g.ranked()[:k]]
        if mode == TEXT:
            bad += bool(np.any(top == 0.0))
        else:
            bad += bool(top.sum() == 0.0)
    return bad / len(groups)


def discretize_score(s: float) -> str:
    if not math.isfinite(s):
        raise ValueError("score must be finite")
    if s >= STRONG_THRESHOLD:
        return "strong"
    if s >= WEAK_THRESHOLD:
        return "weak"
    return "irrelevant"


def metrics_report(groups: Sequence[QueryGroup]) -> dict:
    auc, used, excluded = auc_details(groups)
    return {
        "auc": auc,
        "badcase_at_5_text": badcase_at_5(groups, TEXT),
        "badcase_at_5_formula": badcase_at_5(groups, FORMULA),
        "n_queries": used + excluded,
        "n_excluded": excluded,
    }
