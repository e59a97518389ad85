"""Binary classification metrics and loss-curve inflection detection."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .data import Dataset
from .model import ModelSpec, predict_proba, sample_losses
from .params import ParameterVector

POSITIVE = "covid"
NEGATIVE = "healthy"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> ConfusionMatrix:
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(
            tp=int(np.sum(t & p)), fp=int(np.sum(~t & p)),
            tn=int(np.sum(~t & ~p)), fn=int(np.sum(t & ~p)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    def flipped(self) -> ConfusionMatrix:
        """The same counts with the negative class treated as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def round_metric(value: float, places: int = 2) -> Decimal:
    """Round half-to-even on the shortest decimal repr of ``value``."""
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN)


def format_metric(value: float, places: int = 2) -> str:
    """Table formatting: ``0.7649`` -> ``"0.76"``, ``0.125`` -> ``"0.12"``."""
    return str(round_metric(value, places))


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean, 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    zero_division: bool = False

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> ClassMetrics:
        p, zp = _ratio(cm.tp, cm.tp + cm.fp)
        r, zr = _ratio(cm.tp, cm.tp + cm.fn)
        return cls(p, r, f1_score(p, r), cm.tp + cm.fn, zp or zr)


@dataclass(frozen=True)
class GroupReport:
    """Metrics for one slice of the test set (all samples, or one modality)."""

    confusion: ConfusionMatrix
    per_class: dict[str, ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_f1: float
    accuracy: float
    loss: float
    zero_division: bool

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, loss: float = float("nan")) -> GroupReport:
        pos = ClassMetrics.from_confusion(cm)
        neg = ClassMetrics.from_confusion(cm.flipped())
        support = pos.support + neg.support
        weighted = (pos.f1 * pos.support + neg.f1 * neg.support) / support if support else 0.0
        return cls(
            confusion=cm,
            per_class={POSITIVE: pos, NEGATIVE: neg},
            macro_precision=(pos.precision + neg.precision) / 2,
            macro_recall=(pos.recall + neg.recall) / 2,
            macro_f1=(pos.f1 + neg.f1) / 2,
            weighted_f1=weighted,
            accuracy=cm.accuracy,
            loss=loss,
            zero_division=pos.zero_division or neg.zero_division,
        )


@dataclass(frozen=True)
class EvalReport(GroupReport):
    per_modality: dict[str, GroupReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_predictions(
    y_true, y_pred, tags: Sequence[str] | None = None, losses=None
) -> EvalReport:
    """Build a report from hard predictions; ``losses`` are per-sample losses."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    losses = None if losses is None else np.asarray(losses, dtype=np.float64)
    tags = np.asarray(["" for _ in range(y_true.size)] if tags is None else tags, dtype=object)

    def mean_loss(mask=None) -> float:
        if losses is None:
            return float("nan")
        return float(losses.mean() if mask is None else losses[mask].mean())

    per_modality = {}
    seen = list(dict.fromkeys(tags.tolist()))
    for tag in seen:
        mask = tags == tag
        per_modality[tag] = GroupReport.from_confusion(
            ConfusionMatrix.from_predictions(y_true[mask], y_pred[mask]), mean_loss(mask)
        )
    total = GroupReport.from_confusion(ConfusionMatrix.from_predictions(y_true, y_pred), mean_loss())
    return EvalReport(**{k: getattr(total, k) for k in GroupReport.__dataclass_fields__},
                      per_modality=per_modality)


def evaluate(
    spec: ModelSpec, params: ParameterVector, test: Dataset, threshold: float = 0.5
) -> EvalReport:
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    probs = predict_proba(spec, params, test.features)
    losses = sample_losses(spec, params, test.features, test.labels)
    return report_from_predictions(test.labels, probs >= threshold, test.tags, losses)


class EarlyStopper:
    """Patience counter over a loss sequence.

    A value counts as an improvement when it beats the best so far by at
    least ``min_delta``. ``stopped_at`` is set once ``patience`` consecutive
    non-improving values have been seen.
    """

    def __init__(self, patience: int = 5, min_delta: float = 1e-4):
        if patience < 1:
            raise ValueError("patience must be positive")
        self.patience = patience
        self.min_delta = min_delta
        self.best_index: int | None = None
        self.best_value = float("inf")
        self.stopped_at: int | None = None
        self._count = 0
        self._seen = 0

    def update(self, value: float) -> bool:
        """Record the next value; returns True when training should stop."""
        index = self._seen
        self._seen += 1
        if self.best_index is None or value <= self.best_value - self.min_delta:
            self.best_index, self.best_value = index, value
            self._count = 0
        else:
            self._count += 1
            if self._count >= self.patience and self.stopped_at is None:
                self.stopped_at = index
        return self.stopped_at is not None


def detect_inflection(
    losses: Sequence[float], patience: int = 5, min_delta: float = 1e-4
) -> int | None:
    """Index of the best round once the loss has stalled for ``patience`` rounds."""
    hit = find_inflection(losses, patience, min_delta)
    return None if hit is None else hit[0]


def find_inflection(
    losses: Sequence[float], patience: int = 5, min_delta: float = 1e-4
) -> tuple[int, int] | None:
    """``(best_index, trigger_index)`` for the first stall, or None."""
    if len(losses) == 0:
        raise ValueError("empty loss sequence")
    stopper = EarlyStopper(patience, min_delta)
    for value in losses:
        if stopper.update(float(value)):
            return stopper.best_index, stopper.stopped_at
    return None
