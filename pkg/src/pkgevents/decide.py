"""Threshold-gated classification with Dummy rejection and precision/recall sweeps."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import CLASSES, DUMMY, TARGET_CLASSES
from .errors import ConfigError, EmptyDatasetError

GRID = np.arange(101) / 100.0
TARGET_INDICES = tuple(CLASSES.index(c) for c in TARGET_CLASSES)


@dataclass
class ThresholdPolicy:
    """Per-target-class confidence thresholds; Dummy is never thresholded."""

    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.thresholds.items():
            if name not in TARGET_CLASSES:
                raise ConfigError(f"no threshold allowed for class {name!r}")
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"threshold for {name} must lie in [0, 1], got {t}")

    @classmethod
    def uniform(cls, t: float) -> ThresholdPolicy:
        return cls({name: float(t) for name in TARGET_CLASSES})

    def vector(self) -> np.ndarray:
        """Threshold per class index; missing classes and Dummy get 0."""
        out = np.zeros(len(CLASSES))
        for name, t in self.thresholds.items():
            out[CLASSES.index(name)] = t
        return out


def classify_batch(probs, policy: ThresholdPolicy | None = None) -> np.ndarray:
    """Argmax (lowest index wins ties); a target class is kept only if its
    probability is strictly above its threshold, otherwise Dummy."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    top = probs.argmax(axis=1)
    if policy is None:
        return top
    thresh = policy.vector()
    keep = probs[np.arange(len(top)), top] > thresh[top]
    return np.where((top == DUMMY) | keep, top, DUMMY)


def classify(probs, policy: ThresholdPolicy | None = None) -> int:
    return int(classify_batch(probs, policy)[0])


def precision_recall(preds, labels, cls: int) -> tuple[float, float]:
    """(TP/(TP+FP), TP/(TP+FN)) for class ``cls``; 0 when a denominator is 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    tp = int(np.sum((preds == cls) & (labels == cls)))
    predicted = int(np.sum(preds == cls))
    actual = int(np.sum(labels == cls))
    return (tp / predicted if predicted else 0.0, tp / actual if actual else 0.0)


def confusion_matrix(preds, labels) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    m = np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return m


@dataclass
class EvalReport:
    precision: dict
    recall: dict
    confusion: list
    dummy_rejection_rate: float
    n_windows: int
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "confusion_matrix": {"classes": list(CLASSES), "rows_truth_cols_pred": self.confusion},
            "dummy_rejection_rate": self.dummy_rejection_rate,
            "n_windows": self.n_windows,
            "thresholds": self.thresholds,
        }


def evaluate(probs, labels, policy: ThresholdPolicy | None = None) -> EvalReport:
    """Per-target-class P/R, confusion matrix and Dummy-rejection rate.

    The rejection rate is the fraction of Forklift/Truck ground-truth windows
    that end up predicted as Dummy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDatasetError("empty dataset: nothing to evaluate")
    preds = classify_batch(probs, policy)
    precision, recall = {}, {}
    for name, c in zip(TARGET_CLASSES, TARGET_INDICES):
        precision[name], recall[name] = precision_recall(preds, labels, c)
    targets = labels != DUMMY
    rejected = float(np.mean(preds[targets] == DUMMY)) if targets.any() else 0.0
    return EvalReport(precision, recall, confusion_matrix(preds, labels).tolist(), rejected,
                      int(len(labels)), dict(policy.thresholds) if policy else {})


@dataclass
class PrCurve:
    """Per target class: arrays of thresholds, precision and recall."""

    thresholds: np.ndarray
    precision: dict
    recall: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,threshold,precision,recall\n")
        for name in TARGET_CLASSES:
            for t, p, r in zip(self.thresholds, self.precision[name], self.recall[name]):
                buf.write(f"{name},{t:.2f},{float(p)!r},{float(r)!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> PrCurve:
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        thresholds = {}
        precision = {n: [] for n in TARGET_CLASSES}
        recall = {n: [] for n in TARGET_CLASSES}
        for name, t, p, r in rows:
            thresholds.setdefault(name, []).append(float(t))
            precision[name].append(float(p))
            recall[name].append(float(r))
        grid = np.asarray(thresholds[TARGET_CLASSES[0]])
        return cls(grid, {k: np.asarray(v) for k, v in precision.items()},
                   {k: np.asarray(v) for k, v in recall.items()})


def sweep(probs, labels, grid=GRID) -> PrCurve:
    """Apply one shared threshold to all target classes at every grid point."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(probs) == 0:
        raise EmptyDatasetError("empty dataset: no probabilities to sweep")
    grid = np.asarray(grid, dtype=np.float64)
    precision = {n: np.zeros(len(grid)) for n in TARGET_CLASSES}
    recall = {n: np.zeros(len(grid)) for n in TARGET_CLASSES}
    for g, t in enumerate(grid):
        preds = classify_batch(probs, ThresholdPolicy.uniform(t))
        for name, c in zip(TARGET_CLASSES, TARGET_INDICES):
            precision[name][g], recall[name][g] = precision_recall(preds, labels, c)
    return PrCurve(grid, precision, recall)


@dataclass
class Selection:
    policy: ThresholdPolicy
    achieved: dict
    meets_target: dict


def select_thresholds(curve: PrCurve, precision_target: float = 0.95,
                      recall_floor: float = 0.5) -> Selection:
    """Per class, the grid point of highest precision among those with
    recall >= ``recall_floor``; ties go to higher recall, then lower threshold.

    If no point reaches the floor, the global precision maximum is used and a
    warning is emitted. ``meets_target`` records whether the chosen point
    reaches ``precision_target``.
    """
    thresholds, achieved, meets = {}, {}, {}
    for name in TARGET_CLASSES:
        p = np.asarray(curve.precision[name])
        r = np.asarray(curve.recall[name])
        eligible = np.flatnonzero(r >= recall_floor)
        if len(eligible) == 0:
            warnings.warn(f"{name}: no threshold reaches recall {recall_floor}; "
                          "falling back to the precision maximum", stacklevel=2)
            eligible = np.arange(len(p))
        # lexsort: last key is primary
        order = np.lexsort((curve.thresholds[eligible], -r[eligible], -p[eligible]))
        best = eligible[order[0]]
        thresholds[name] = float(curve.thresholds[best])
        achieved[name] = {"precision": float(p[best]), "recall": float(r[best])}
        meets[name] = bool(p[best] >= precision_target)
    return Selection(ThresholdPolicy(thresholds), achieved, meets)
