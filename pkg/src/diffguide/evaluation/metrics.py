"""Detection AP / mAP, corruption robustness (mPC, rPC) and detection calibration (D-ECE)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..detector.boxes import iou_numpy

IOU_RANGE = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple
    label: int
    score: float
    image_id: object

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"invalid box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


# ground truth: image_id -> (boxes [N, 4], labels [N])
GroundTruth = Mapping[object, tuple]


def detections_from_boxlists(image_ids: Sequence, results) -> list[Detection]:
    """Flatten per-image detector outputs (objects with boxes/labels/scores) into Detections."""
    dets = []
    for img_id, r in zip(image_ids, results):
        boxes = np.asarray(r.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(r.labels).reshape(-1)
        scores = np.asarray(r.scores, dtype=np.float64).reshape(-1)
        for b, l, s in zip(boxes, labels, scores):
            if b[2] > b[0] and b[3] > b[1]:
                dets.append(Detection(tuple(float(v) for v in b), int(l), float(min(max(s, 0.0), 1.0)), img_id))
    return dets


def _class_gt(gts: GroundTruth, cls: int) -> dict:
    out = {}
    for img_id, (boxes, labels) in gts.items():
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(labels).reshape(-1)
        out[img_id] = boxes[labels == cls]
    return out


def match_detections(dets: Sequence[Detection], gt_boxes: Mapping[object, np.ndarray],
                     iou_thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order.

    Each detection takes the highest-IoU ground truth that is still unmatched
    and overlaps by at least ``iou_thr``. Returns (scores, is_true_positive),
    both in the processed order. Ties in score keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_boxes.items()}
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        scores[rank] = d.score
        g = gt_boxes.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = iou_numpy(np.asarray(d.box)[None], g)[0]
        ious[used[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            used[d.image_id][j] = True
            tp[rank] = True
    return scores, tp


def average_precision_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision envelope."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class ClassAP:
    ap: float
    num_gt: int
    num_dets: int

    @property
    def empty(self) -> bool:
        return self.num_gt == 0 and self.num_dets == 0


def class_ap(dets: Sequence[Detection], gt_boxes: Mapping[object, np.ndarray], iou_thr: float) -> ClassAP:
    n_gt = sum(len(v) for v in gt_boxes.values())
    _, tp = match_detections(dets, gt_boxes, iou_thr)
    return ClassAP(average_precision_from_flags(tp, n_gt), n_gt, len(dets))


def ap_at_iou(dets: Sequence[Detection], gt_boxes: Mapping[object, np.ndarray], iou_thr: float = 0.5) -> float:
    """AP of one class. ``gt_boxes`` maps image id to that class's ``[N, 4]`` boxes."""
    return class_ap(dets, gt_boxes, iou_thr).ap


def per_class_ap(dets: Sequence[Detection], gts: GroundTruth, classes: Iterable[int],
                 iou_thr: float = 0.5) -> dict[int, ClassAP]:
    out = {}
    for c in classes:
        cd = [d for d in dets if d.label == c]
        out[c] = class_ap(cd, _class_gt(gts, c), iou_thr)
    return out


def _mean_over_classes(aps: Mapping[int, ClassAP]) -> float:
    vals = [a.ap for a in aps.values() if a.num_gt > 0]
    if not vals:
        raise MetricError("no class has ground truth; mAP undefined")
    return float(np.mean(vals))


def map50(dets: Sequence[Detection], gts: GroundTruth, classes: Iterable[int]) -> float:
    return _mean_over_classes(per_class_ap(dets, gts, list(classes), 0.5))


def ap_range(dets: Sequence[Detection], gts: GroundTruth, classes: Iterable[int],
             thresholds: Sequence[float] = IOU_RANGE) -> float:
    """Mean of mAP over IoU thresholds 0.50:0.05:0.95."""
    classes = list(classes)
    return float(np.mean([_mean_over_classes(per_class_ap(dets, gts, classes, t)) for t in thresholds]))


# -- corruption robustness --------------------------------------------------

def mpc(results: Mapping, kinds: Sequence[str] | None = None, severities=range(1, 6)) -> float:
    """Unweighted mean over all (corruption, severity) cells.

    Keys may be ``CorruptionSpec`` objects or ``(kind, severity)`` tuples.
    """
    from .corruptions import CORRUPTIONS

    kinds = list(kinds or CORRUPTIONS)
    norm = {}
    for k, v in results.items():
        key = (k.kind, k.severity) if hasattr(k, "kind") else (k[0], int(k[1]))
        norm[key] = float(v)
    wanted = [(k, s) for k in kinds for s in severities]
    missing = [w for w in wanted if w not in norm]
    if missing:
        raise MetricError(f"missing corruption cells: {missing}")
    return float(np.mean([norm[w] for w in wanted]))


def rpc(mpc_value: float, clean_ap: float) -> float:
    """Ratio of corrupted to clean performance (a fraction; multiply by 100 for %)."""
    if not clean_ap > 0:
        raise MetricError("clean AP must be positive")
    return float(mpc_value) / float(clean_ap)


# -- calibration ------------------------------------------------------------

@dataclass
class CalibrationBin:
    confidence_mean: float
    precision: float
    count: int
    lower: float = 0.0
    upper: float = 1.0


@dataclass
class CalibrationReport:
    bins: list = field(default_factory=list)
    d_ece: float = 0.0
    total: int = 0
    empty: bool = False

    def as_dict(self) -> dict:
        return {
            "d_ece": self.d_ece,
            "total": self.total,
            "empty": self.empty,
            "bins": [vars(b) for b in self.bins],
        }


def calibration_from_flags(scores: np.ndarray, correct: np.ndarray, bins: int = 10) -> CalibrationReport:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n = len(scores)
    if n == 0:
        return CalibrationReport([], 0.0, 0, empty=True)
    idx = np.minimum((scores * bins).astype(int), bins - 1)
    report = CalibrationReport(total=n)
    gap = 0.0
    for b in range(bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt == 0:
            continue
        conf = float(scores[sel].mean())
        prec = float(correct[sel].mean())
        report.bins.append(CalibrationBin(conf, prec, cnt, b / bins, (b + 1) / bins))
        gap += cnt / n * abs(prec - conf)
    report.d_ece = float(gap)
    return report


def d_ece(dets: Sequence[Detection], gts: GroundTruth, bins: int = 10, iou_thr: float = 0.5) -> CalibrationReport:
    """Confidence-binned calibration gap of detections.

    A detection counts as correct when greedy per-class matching pairs it with
    a ground truth of its class at IoU >= ``iou_thr``; unmatched detections are
    incorrect in their bin.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    classes = sorted({d.label for d in dets})
    scores, flags = [], []
    for c in classes:
        s, tp = match_detections([d for d in dets if d.label == c], _class_gt(gts, c), iou_thr)
        scores.append(s)
        flags.append(tp)
    if not scores:
        return CalibrationReport([], 0.0, 0, empty=True)
    return calibration_from_flags(np.concatenate(scores), np.concatenate(flags), bins)
