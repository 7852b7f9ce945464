"""Split-level glue: run inference over frames, fit boxes, score the result."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .boxes import Detection
from .boxfit import NEIGHBORHOOD, detect_attended, select_gaze_box
from .dataset import DatasetManifest, FrameRecord, attended_box, filter_valid_gaze, load_image
from .dense import (MAP_SUFFIX, ClassProbMap, DenseModel, dense_inference, load_prob_map,
                    save_mask, save_prob_map, sliding_window_inference, upsample_to_mask)
from .errors import DataError
from .evaluation import EvalReport, GroundTruth, map_metrics
from .model import PatchModel


def eval_frames(manifest: DatasetManifest, split: str) -> List[FrameRecord]:
    frames = filter_valid_gaze(manifest).split(split)
    if not frames:
        raise DataError(f"split {split!r} has no frames with valid gaze")
    return frames


def infer_frames(model: Union[PatchModel, DenseModel], frames: Sequence[FrameRecord], out_dir=None,
                 masks: bool = False, batch_size: int = 64, jobs: int = 1) -> Dict[str, ClassProbMap]:
    """Class maps for ``frames`` by sliding window (patch model) or one dense pass (dense model)."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    maps = {}
    for frame in frames:
        image = load_image(frame.image_path)
        if isinstance(model, DenseModel):
            prob_map = dense_inference(model, image)
        else:
            prob_map = sliding_window_inference(model, image, batch_size=batch_size, jobs=jobs)
        if out is not None:
            save_prob_map(out / f"{frame.frame_id}{MAP_SUFFIX}", prob_map)
            if masks:
                save_mask(out / f"{frame.frame_id}.png", upsample_to_mask(prob_map))
        maps[frame.frame_id] = prob_map
    return maps


def load_maps(map_dir, frames: Sequence[FrameRecord]) -> Dict[str, ClassProbMap]:
    map_dir = Path(map_dir)
    maps = {}
    for frame in frames:
        path = map_dir / f"{frame.frame_id}{MAP_SUFFIX}"
        if not path.is_file():
            raise DataError(f"no class map for frame {frame.frame_id} in {map_dir}")
        maps[frame.frame_id] = load_prob_map(path)
    return maps


def fit_boxes(maps: Dict[str, ClassProbMap], frames: Sequence[FrameRecord], other_index: int,
              neighborhood: int = NEIGHBORHOOD, rule: str = "mode") -> Dict[str, Optional[Detection]]:
    return {f.frame_id: detect_attended(maps[f.frame_id], f.gaze, other_index, neighborhood, rule)
            for f in frames}


def select_gaze_boxes(external: Dict[str, List[Detection]],
                      frames: Sequence[FrameRecord]) -> Dict[str, Optional[Detection]]:
    """Supervised baseline: keep the external detection that contains each frame's gaze."""
    return {f.frame_id: select_gaze_box(external.get(f.frame_id, []), f.gaze) for f in frames}


def ground_truths(manifest: DatasetManifest, frames: Sequence[FrameRecord]) -> Dict[str, Optional[GroundTruth]]:
    other = manifest.other_index
    gts = {}
    for f in frames:
        box = attended_box(f, other)
        if f.attended_class != other and box is None:
            raise DataError(f"frame {f.frame_id} attends class {f.attended_class} but has no box for it")
        gts[f.frame_id] = None if box is None else (f.attended_class, box)
    return gts


def score_detections(detections: Dict[str, Optional[Detection]], manifest: DatasetManifest,
                     frames: Sequence[FrameRecord]) -> EvalReport:
    gts = ground_truths(manifest, frames)
    pairs = [(fid, d) for fid, d in detections.items() if d is not None and fid in gts]
    classes = [k for k in range(manifest.num_classes) if k != manifest.other_index]
    return map_metrics(pairs, gts, classes)
