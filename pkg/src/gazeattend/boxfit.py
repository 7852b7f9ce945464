"""From a class map and a gaze point to one attended-object detection.

Also holds the gaze-box selection used with externally produced detections,
and the JSON-lines detections file shared by both routes.
"""

from __future__ import annotations

import json
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox, Detection
from .dataset import GazeSample, gaze_in_bounds
from .dense import ClassProbMap, SegmentationMask, upsample_probs, upsample_to_mask
from .errors import DataError

NEIGHBORHOOD = 100


def _check_gaze(gaze: GazeSample, width: int, height: int) -> None:
    if not (gaze.valid and gaze_in_bounds(gaze.x, gaze.y, width, height)):
        raise DataError(f"gaze ({gaze.x}, {gaze.y}) is not valid for a {width}x{height} frame")


def _axis_window(center: float, side: int, size: int):
    side = min(side, size)
    start = int(np.floor(center - side / 2 + 0.5))
    start = min(max(start, 0), size - side)
    return start, start + side


def neighborhood_labels(mask: SegmentationMask, gaze: GazeSample, side: int = NEIGHBORHOOD) -> np.ndarray:
    """Labels in the ``side``-square window centred on the gaze, shifted inside the frame."""
    height, width = mask.labels.shape
    _check_gaze(gaze, width, height)
    y0, y1 = _axis_window(gaze.y, side, height)
    x0, x1 = _axis_window(gaze.x, side, width)
    return mask.labels[y0:y1, x0:x1]


def select_attended_class(mask: SegmentationMask, gaze: GazeSample, other_index: int,
                          neighborhood: int = NEIGHBORHOOD, rule: str = "mode") -> Optional[int]:
    """Most frequent class around the gaze (ties to the smaller index); None when it is "other".

    ``rule="median"`` takes the lower integer median of the window labels instead.
    """
    window = neighborhood_labels(mask, gaze, neighborhood).ravel()
    if rule == "mode":
        cls = int(np.argmax(np.bincount(window)))
    elif rule == "median":
        cls = int(np.sort(window)[(window.size - 1) // 2])
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return None if cls == other_index else cls


def extract_component(mask: SegmentationMask, class_id: int, gaze: GazeSample) -> np.ndarray:
    """Boolean map of the 4-connected ``class_id`` component attached to the gaze.

    If the gaze pixel has another class, the component holding the class pixel
    nearest to it wins; equal distances go to the component whose first pixel
    in row-major order comes first.
    """
    labels = mask.labels
    height, width = labels.shape
    _check_gaze(gaze, width, height)
    region = labels == class_id
    if not region.any():
        raise DataError(f"class {class_id} does not occur in the mask")
    components, _ = ndimage.label(region)
    gr, gc = gaze.pixel
    chosen = components[gr, gc]
    if chosen == 0:
        rows, cols = np.nonzero(region)
        d2 = (rows - gr) ** 2 + (cols - gc) ** 2
        nearest = np.unique(components[rows[d2 == d2.min()], cols[d2 == d2.min()]])
        if len(nearest) == 1:
            chosen = nearest[0]
        else:
            flat = components.ravel()
            first = {lab: int(np.argmax(flat == lab)) for lab in nearest}
            chosen = min(nearest, key=first.__getitem__)
    return components == chosen


def fit_box(component) -> BoundingBox:
    """Tight axis-aligned box around a boolean component map or an (N, 2) array of (row, col)."""
    comp = np.asarray(component)
    if comp.dtype == bool:
        rows, cols = np.nonzero(comp)
    else:
        comp = comp.reshape(-1, 2)
        rows, cols = comp[:, 0], comp[:, 1]
    if len(rows) == 0:
        raise DataError("cannot fit a box to an empty component")
    r0, r1, c0, c1 = int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())
    return BoundingBox(c0, r0, c1 - c0 + 1, r1 - r0 + 1)


def detect_attended(prob_map: ClassProbMap, gaze: GazeSample, other_index: int,
                    neighborhood: int = NEIGHBORHOOD, rule: str = "mode") -> Optional[Detection]:
    mask = upsample_to_mask(prob_map)
    cls = select_attended_class(mask, gaze, other_index, neighborhood, rule)
    if cls is None:
        return None
    component = extract_component(mask, cls, gaze)
    score = float(upsample_probs(prob_map, cls)[component].mean())
    return Detection(cls, fit_box(component), min(max(score, 0.0), 1.0))


def select_gaze_box(detections: Sequence[Detection], gaze: GazeSample) -> Optional[Detection]:
    """Smallest box containing the gaze; equal areas go to the higher score, then list order."""
    best = None
    for det in detections:
        if not det.box.contains(gaze.x, gaze.y):
            continue
        if best is None or (det.box.area, -det.score) < (best.box.area, -best.score):
            best = det
    return best


# ---------------------------------------------------------------------------
# detections file: one JSON object per line, {frame_id, detections: [...]}


def write_detections(path, per_frame: Dict[str, Iterable[Detection]]) -> None:
    with open(path, "w") as fh:
        for frame_id, dets in per_frame.items():
            row = {"frame_id": frame_id, "detections": [d.to_json() for d in dets]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_detections(path) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                frame_id = str(row["frame_id"])
                dets = [Detection.from_json(d) for d in row["detections"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed detections row: {exc!r}") from exc
            if frame_id in out:
                raise DataError(f"{path}:{lineno}: duplicate frame id {frame_id!r}")
            out[frame_id] = dets
    return out
