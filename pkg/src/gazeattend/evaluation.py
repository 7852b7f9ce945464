"""Attended-object detection metrics (COCO-style AP/mAP), timing and confusion export.

Every evaluated frame has at most one ground-truth box (its attended object)
and at most one detection per method. Frames attending "other" carry no
ground truth, so any detection there is a false positive.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import BoundingBox, Detection
from .errors import DataError
from .model import evaluate_classifier

IOU_THRESHOLDS = np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1)
RECALL_GRID = np.linspace(0.0, 1.0, 101)

GroundTruth = Tuple[int, BoundingBox]
FrameDetection = Tuple[str, Detection]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _check_frames(detections: Sequence[FrameDetection], gts: Mapping[str, Optional[GroundTruth]]):
    seen = set()
    for frame_id, _ in detections:
        if frame_id in seen:
            raise DataError(f"duplicate frame id {frame_id!r} among detections")
        if frame_id not in gts:
            raise DataError(f"detection for frame {frame_id!r} without ground-truth entry")
        seen.add(frame_id)


def average_precision(detections: Sequence[FrameDetection], gts: Mapping[str, Optional[GroundTruth]],
                      class_id: int, iou_threshold: float) -> float:
    """101-point interpolated AP for one class; NaN when the class has no ground truth."""
    _check_frames(detections, gts)
    n_gt = sum(1 for g in gts.values() if g is not None and g[0] == class_id)
    if n_gt == 0:
        return float("nan")
    dets = [(fid, d) for fid, d in detections if d.class_id == class_id]
    if not dets:
        return 0.0
    scores = np.array([d.score for _, d in dets])
    order = np.argsort(-scores, kind="mergesort")
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        fid, d = dets[i]
        g = gts[fid]
        tp[rank] = g is not None and g[0] == class_id and iou(d.box, g[1]) >= iou_threshold
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


@dataclass
class EvalReport:
    per_class_ap: Dict[int, Tuple[float, float]]  # class -> (AP over 0.50:0.95, AP50)
    map: float
    map50: float
    num_frames: int
    timing: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        return {
            "per_class": {str(k): {"ap": clean(ap), "ap50": clean(ap50)}
                          for k, (ap, ap50) in sorted(self.per_class_ap.items())},
            "map": clean(self.map),
            "map50": clean(self.map50),
            "num_frames": self.num_frames,
            "timing": dict(self.timing),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        nan = float("nan")
        per = {int(k): (nan if v["ap"] is None else v["ap"], nan if v["ap50"] is None else v["ap50"])
               for k, v in doc["per_class"].items()}
        return cls(per, doc["map"] if doc["map"] is not None else nan,
                   doc["map50"] if doc["map50"] is not None else nan,
                   doc["num_frames"], doc.get("timing", {}))


def map_metrics(detections: Sequence[FrameDetection], gts: Mapping[str, Optional[GroundTruth]],
                class_ids: Iterable[int]) -> EvalReport:
    """mAP over IoU 0.50:0.05:0.95 and mAP50, averaged over ``class_ids`` that have ground truth.

    ``class_ids`` should exclude the "other" class.
    """
    if not gts:
        raise DataError("no ground-truth frames to evaluate")
    _check_frames(detections, gts)
    per_class = {}
    for k in class_ids:
        aps = [average_precision(detections, gts, k, t) for t in IOU_THRESHOLDS]
        per_class[int(k)] = (float(np.mean(aps)), aps[0])
    scored = [v for v in per_class.values() if not math.isnan(v[1])]
    if scored:
        m = float(np.mean([v[0] for v in scored]))
        m50 = float(np.mean([v[1] for v in scored]))
    else:
        m = m50 = float("nan")
    return EvalReport(per_class, m, m50, len(gts))


def timing_benchmark(methods: Mapping[str, Callable], frames: Sequence, repetitions: int = 1,
                     warmup: int = 1) -> Dict[str, float]:
    """Mean wall seconds per frame for each method; the first ``warmup`` passes are discarded."""
    if warmup < 1:
        raise ValueError("at least one warmup repetition is required")
    out = {}
    for name, fn in methods.items():
        for _ in range(warmup):
            fn(frames[0])
        t0 = time.perf_counter()
        for _ in range(repetitions):
            for frame in frames:
                fn(frame)
        out[name] = (time.perf_counter() - t0) / (repetitions * len(frames))
    return out


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_per_class_csv(path, reports: Mapping[str, EvalReport], class_names: Sequence[str]) -> None:
    """One AP row and one AP50 row per method; one column per class plus "All"."""
    classes = sorted({k for r in reports.values() for k in r.per_class_ap})

    def fmt(v):
        return "" if v is None or math.isnan(v) else f"{v:.4f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", *[class_names[k] if k < len(class_names) else str(k) for k in classes], "All"])
        for method, r in reports.items():
            w.writerow([method, "AP", *[fmt(r.per_class_ap[k][0]) if k in r.per_class_ap else "" for k in classes],
                        fmt(r.map)])
            w.writerow([method, "AP50", *[fmt(r.per_class_ap[k][1]) if k in r.per_class_ap else "" for k in classes],
                        fmt(r.map50)])


def confusion_report(model, manifest, split: str, csv_path=None):
    """Classifier confusion matrix on ``split``; optionally written as a labelled CSV."""
    report = evaluate_classifier(model, manifest, split)
    if csv_path is not None:
        names = report.class_names
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *names])
            for name, row in zip(names, report.confusion):
                w.writerow([name, *row.tolist()])
    return report
