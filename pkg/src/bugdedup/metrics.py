"""Confusion-matrix metrics and per-k curve aggregation.

Classification metrics follow the standard confusion-matrix forms;
accuracy is (tp+tn)/total. Zero denominators yield metric 0 with an
explicit flag rather than an error, so heavily skewed dev/test runs
never crash. Curve aggregation treats every (query, database-item)
decision as binary at cutoff k (retained implies positive) and emits
both the micro (pooled confusion) and macro (per-query mean) views,
since either aggregation is defensible for ranked retrieval.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @classmethod
    def from_decisions(cls, decisions: Iterable[tuple[bool, bool]]) -> "ConfusionMatrix":
        """Build from (predicted, actual) pairs."""
        tp = fp = fn = tn = 0
        for predicted, actual in decisions:
            if predicted and actual:
                tp += 1
            elif predicted:
                fp += 1
            elif actual:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)


@dataclass(frozen=True)
class MetricRow:
    """One evaluation row; micro values are primary, macro ride along.

    ``zero_denominator`` names the metrics that defaulted to 0 because
    their denominator was empty.
    """

    precision: float
    recall: float
    f1: float
    accuracy: float
    k: int | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    zero_denominator: tuple[str, ...] = ()
    macro_precision: float | None = None
    macro_recall: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "k": self.k,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "zero_denominator": list(self.zero_denominator),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
        }
        out.update(self.extra)
        return out


def classification_metrics(cm: ConfusionMatrix, k: int | None = None) -> MetricRow:
    """Precision, recall, F1, accuracy from one confusion matrix."""
    if cm.total == 0:
        raise ValueError("metrics are undefined for an all-zero confusion matrix")
    flags = []
    if cm.tp + cm.fp:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision, flags = 0.0, flags + ["precision"]
    if cm.tp + cm.fn:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall, flags = 0.0, flags + ["recall"]
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, flags = 0.0, flags + ["f1"]
    accuracy = (cm.tp + cm.tn) / cm.total
    return MetricRow(
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=accuracy,
        k=k,
        tp=cm.tp,
        fp=cm.fp,
        fn=cm.fn,
        tn=cm.tn,
        zero_denominator=tuple(flags),
    )


@dataclass(frozen=True)
class QueryOutcome:
    """What one query retrieved and what was true.

    ``candidates`` is the retrieval-ranked top list; ``kept`` is the
    classifier verdict per candidate (all True when no classifier ran).
    Truncating both at a cutoff k reproduces the run the cascade would
    have made at that smaller k, which is what lets one run at k_max
    yield the whole curve.
    """

    query: str
    candidates: tuple[str, ...]
    kept: tuple[bool, ...]
    relevant: frozenset[str]
    db_size: int

    def __post_init__(self):
        if len(self.candidates) != len(self.kept):
            raise ValueError("candidates and kept verdicts must align")

    def confusion_at(self, k: int) -> ConfusionMatrix:
        positives = {c for c, keep in zip(self.candidates[:k], self.kept[:k]) if keep}
        tp = len(positives & self.relevant)
        fp = len(positives) - tp
        fn = len(self.relevant) - tp
        tn = self.db_size - len(positives) - fn
        return ConfusionMatrix(tp, fp, fn, tn)


def aggregate_curves(outcomes: Sequence[QueryOutcome], k_list: Sequence[int]) -> list[MetricRow]:
    """One MetricRow per k: pooled-confusion metrics plus macro means.

    Macro recall averages tp/|relevant| over queries that have relevant
    items (queries without peers cannot score recall); macro precision
    averages hits/k over all queries. Permutation of query order cannot
    change any output.
    """
    if not outcomes:
        raise ValueError("cannot aggregate an empty result set")
    rows = []
    for k in sorted(set(k_list)):
        total = ConfusionMatrix()
        recalls: list[float] = []
        precisions: list[float] = []
        for outcome in outcomes:
            cm = outcome.confusion_at(k)
            total = total + cm
            if outcome.relevant:
                recalls.append(cm.tp / len(outcome.relevant))
            precisions.append(cm.tp / k)
        row = classification_metrics(total, k=k)
        rows.append(
            MetricRow(
                precision=row.precision,
                recall=row.recall,
                f1=row.f1,
                accuracy=row.accuracy,
                k=k,
                tp=row.tp,
                fp=row.fp,
                fn=row.fn,
                tn=row.tn,
                zero_denominator=row.zero_denominator,
                macro_precision=sum(precisions) / len(precisions) if precisions else 0.0,
                macro_recall=sum(recalls) / len(recalls) if recalls else None,
            )
        )
    return rows


CSV_COLUMNS = (
    "method",
    "k",
    "precision",
    "recall",
    "f1",
    "accuracy",
    "wall_clock_ms",
    "embed_calls",
    "pair_classifications",
    "macro_precision",
    "macro_recall",
)


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    """Write evaluation rows in the fixed report schema, one per (method, k)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})
