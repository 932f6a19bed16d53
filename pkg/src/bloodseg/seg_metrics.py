"""Pixelwise segmentation metrics: class accuracy, IoU, boundary F1 and their
aggregates (global/mean accuracy, mean/weighted IoU, mean BF score).

Background (ID 0) is excluded from the evaluated classes by default: only
pixels whose ground truth is an evaluated class are tallied.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .label_codec import CLASS_NAMES

CELL_CLASSES = (1, 2, 3)
AGGREGATE_KEYS = ("GlobalAccuracy", "MeanAccuracy", "MeanIoU", "WeightedIoU", "MeanBFScore")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K x K, row = truth, column = prediction
    evaluated: tuple[int, ...] = CELL_CLASSES

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.evaluated != other.evaluated or self.counts.shape != other.counts.shape:
            raise ValueError("cannot add confusion matrices over different class sets")
        return ConfusionMatrix(self.counts + other.counts, self.evaluated)

    def tp_fp_fn(self, c: int) -> tuple[int, int, int]:
        tp = int(self.counts[c, c])
        return tp, int(self.counts[:, c].sum()) - tp, int(self.counts[c, :].sum()) - tp


def confusion(
    pred: np.ndarray, truth: np.ndarray, evaluated: Sequence[int] = CELL_CLASSES, num_classes: int = 4
) -> ConfusionMatrix:
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    keep = np.isin(truth, evaluated)
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), tuple(evaluated))


def class_accuracy(cm: ConfusionMatrix, c: int) -> float:
    """Recall TP / (TP + FN)."""
    tp, _, fn = cm.tp_fp_fn(c)
    if tp + fn == 0:
        raise UndefinedMetricError(f"class {c} has no ground-truth pixels")
    return tp / (tp + fn)


def binary_accuracy(cm: ConfusionMatrix, c: int) -> float:
    """(TP + TN) / total with class ``c`` against the rest."""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("no evaluated pixels")
    tp, fp, fn = cm.tp_fp_fn(c)
    return (total - fp - fn) / total


def iou(cm: ConfusionMatrix, c: int) -> float:
    tp, fp, fn = cm.tp_fp_fn(c)
    if tp + fp + fn == 0:
        raise UndefinedMetricError(f"class {c} absent from both prediction and truth")
    return tp / (tp + fp + fn)


def class_boundary(label: np.ndarray, c: int, connectivity: int = 4) -> np.ndarray:
    """Pixels of class ``c`` with an in-image neighbour of another class."""
    mask = label == c
    diff = np.zeros_like(mask)
    h, w = label.shape
    shifts = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        shifts += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    elif connectivity != 4:
        raise ValueError("connectivity must be 4 or 8")
    for dy, dx in shifts:
        dst = (slice(max(-dy, 0), h - max(dy, 0)), slice(max(-dx, 0), w - max(dx, 0)))
        src = (slice(max(dy, 0), h - max(-dy, 0)), slice(max(dx, 0), w - max(-dx, 0)))
        diff[dst] |= label[src] != c
    return mask & diff


def default_tolerance(shape: tuple[int, int]) -> float:
    return float(math.ceil(0.0075 * math.hypot(*shape)))


def _matched(a: np.ndarray, b: np.ndarray, tolerance: float) -> int:
    """Pixels of ``a`` within ``tolerance`` (Euclidean) of some pixel of ``b``."""
    if not a.any() or not b.any():
        return 0
    dist = ndimage.distance_transform_edt(~b)
    return int(np.count_nonzero(a & (dist <= tolerance)))


def bf_score(
    pred: np.ndarray, truth: np.ndarray, c: int, tolerance: float | None = None, connectivity: int = 4
) -> float:
    """Boundary F1 for class ``c``; NaN when the class is absent from both masks."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if tolerance is None:
        tolerance = default_tolerance(truth.shape)
    pb = class_boundary(pred, c, connectivity)
    tb = class_boundary(truth, c, connectivity)
    if not pb.any() and not tb.any():
        in_pred, in_truth = bool((pred == c).any()), bool((truth == c).any())
        if not in_pred and not in_truth:
            return math.nan
        return 1.0 if in_pred and in_truth else 0.0
    precision = _matched(pb, tb, tolerance) / pb.sum() if pb.any() else 0.0
    recall = _matched(tb, pb, tolerance) / tb.sum() if tb.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class ClassMetrics:
    class_id: int
    accuracy: float | None
    iou: float | None
    bf: float | None
    binary_accuracy: float | None = None


@dataclass
class AggregateMetrics:
    global_accuracy: float | None
    mean_accuracy: float | None
    mean_iou: float | None
    weighted_iou: float | None
    mean_bf: float | None

    def as_table(self) -> dict[str, float | None]:
        return dict(zip(AGGREGATE_KEYS, (self.global_accuracy, self.mean_accuracy, self.mean_iou,
                                         self.weighted_iou, self.mean_bf)))


def _mean(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return sum(vals) / len(vals) if vals else None


def aggregate(
    per_class: Sequence[ClassMetrics],
    frequencies: Mapping[int, float],
    cm: ConfusionMatrix | None = None,
) -> AggregateMetrics:
    """Table-style aggregates from classwise metrics and truth frequencies.

    Undefined (None/NaN) classwise values are left out of the unweighted means.
    Global accuracy is trace/total when ``cm`` is given, otherwise the
    frequency-weighted class accuracy, which is the same quantity.
    """
    if not per_class:
        raise UndefinedMetricError("no evaluated classes")
    if cm is not None:
        total = cm.total
        trace = sum(int(cm.counts[c, c]) for c in cm.evaluated)
        global_acc = trace / total if total else None
    else:
        global_acc = sum(frequencies.get(m.class_id, 0.0) * m.accuracy for m in per_class
                         if m.accuracy is not None)
    defined_iou = [m for m in per_class if m.iou is not None]
    weighted = sum(frequencies.get(m.class_id, 0.0) * m.iou for m in defined_iou) if defined_iou else None
    return AggregateMetrics(
        global_accuracy=global_acc,
        mean_accuracy=_mean(m.accuracy for m in per_class),
        mean_iou=_mean(m.iou for m in per_class),
        weighted_iou=weighted,
        mean_bf=_mean(m.bf for m in per_class),
    )


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


@dataclass
class EvalReport:
    per_class: list[ClassMetrics]
    aggregate: AggregateMetrics
    pixel_counts: dict[int, int]
    frequencies: dict[int, float]
    confusion: list[list[int]] = field(default_factory=list)
    images: int = 0
    bf_tolerance: float | None = None

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "bf_tolerance": self.bf_tolerance,
            "classes": [
                {"class": CLASS_NAMES.get(m.class_id, str(m.class_id)), **asdict(m),
                 "pixel_count": self.pixel_counts[m.class_id], "frequency": self.frequencies[m.class_id]}
                for m in self.per_class
            ],
            "aggregate": self.aggregate.as_table(),
            "confusion": self.confusion,
            "note": "undefined metrics are null and excluded from means",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        def fmt(v):
            return "     n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:8.5f}"

        lines = [f"{'Class':<10}{'Accuracy':>10}{'IoU':>10}{'MeanBF':>10}"]
        for m in self.per_class:
            name = CLASS_NAMES.get(m.class_id, str(m.class_id))
            lines.append(f"{name:<10}{fmt(m.accuracy):>10}{fmt(m.iou):>10}{fmt(m.bf):>10}")
        lines.append("")
        for key, v in self.aggregate.as_table().items():
            lines.append(f"{key:<16}{fmt(v)}")
        return "\n".join(lines) + "\n"


class Accumulator:
    """Sums one confusion matrix over images and keeps per-image BF scores.

    A class's BF score is the mean over images where it is defined.
    """

    def __init__(self, num_classes: int = 4, evaluated: Sequence[int] = CELL_CLASSES,
                 tolerance: float | None = None, connectivity: int = 4):
        self.num_classes = num_classes
        self.evaluated = tuple(evaluated)
        self.tolerance = tolerance
        self.connectivity = connectivity
        self.cm = ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64), self.evaluated)
        self.bf: dict[int, list[float]] = {c: [] for c in self.evaluated}
        self.images = 0

    def add(self, pred: np.ndarray, truth: np.ndarray) -> None:
        self.cm = self.cm + confusion(pred, truth, self.evaluated, self.num_classes)
        for c in self.evaluated:
            s = bf_score(pred, truth, c, self.tolerance, self.connectivity)
            if not math.isnan(s):
                self.bf[c].append(s)
        self.images += 1

    def report(self) -> EvalReport:
        return build_report(self.cm, {c: _mean(v) for c, v in self.bf.items()}, self.images, self.tolerance)


def build_report(cm: ConfusionMatrix, bf: Mapping[int, float | None], images: int = 1,
                 tolerance: float | None = None) -> EvalReport:
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("no pixels of any evaluated class in the ground truth")
    counts = {c: int(cm.counts[c, :].sum()) for c in cm.evaluated}
    freqs = {c: counts[c] / total for c in cm.evaluated}
    per_class = [
        ClassMetrics(c, _maybe(class_accuracy, cm, c), _maybe(iou, cm, c), bf.get(c),
                     _maybe(binary_accuracy, cm, c))
        for c in cm.evaluated
    ]
    return EvalReport(per_class, aggregate(per_class, freqs, cm), counts, freqs,
                      cm.counts.tolist(), images, tolerance)


def evaluate_pair(pred: np.ndarray, truth: np.ndarray, evaluated: Sequence[int] = CELL_CLASSES,
                  num_classes: int = 4, tolerance: float | None = None) -> EvalReport:
    acc = Accumulator(num_classes, evaluated, tolerance)
    acc.add(pred, truth)
    return acc.report()
