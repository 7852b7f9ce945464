"""Whole-frame class maps from the patch classifier.

Two routes produce the same kind of :class:`ClassProbMap`: classifying a
window around every grid cell (slow, one classifier call per cell), or
running the fully convolutional version of the classifier once.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from PIL import Image

from .dataset import window_origin
from .errors import ConfigError, DataError
from .model import (WEIGHTS_FILE, ClassifierSpec, PatchClassifier, PatchModel, Preprocessor,
                    build_features, read_meta, save_artifact)


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    stride: int
    window: int
    frame_size: Tuple[int, int]  # (W, H)

    @classmethod
    def for_frame(cls, width: int, height: int, stride: int, window: int) -> "GridGeometry":
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        return cls(math.ceil(height / stride), math.ceil(width / stride), stride, window, (width, height))

    def cell_center(self, r: int, c: int) -> Tuple[float, float]:
        return (c + 0.5) * self.stride, (r + 0.5) * self.stride

    def cell_window(self, r: int, c: int) -> Tuple[int, int]:
        """Top-left of the window classified for cell (r, c)."""
        cx, cy = self.cell_center(r, c)
        return window_origin(cx, cy, self.window, *self.frame_size)

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "stride": self.stride,
                "window": self.window, "frame_size": list(self.frame_size)}


@dataclass
class ClassProbMap:
    geometry: GridGeometry
    probs: np.ndarray  # rows x cols x C

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=2)


@dataclass
class SegmentationMask:
    labels: np.ndarray  # H x W
    frame_size: Tuple[int, int]


# ---------------------------------------------------------------------------
# sliding window


def _crop_cells(image, geometry, cells):
    w = geometry.window
    out = np.empty((len(cells), w, w, 3), dtype=np.uint8)
    for i, (r, c) in enumerate(cells):
        x0, y0 = geometry.cell_window(r, c)
        out[i] = image[y0:y0 + w, x0:x0 + w]
    return out


def sliding_window_inference(model: PatchModel, image: np.ndarray, window: Optional[int] = None,
                             stride: Optional[int] = None, batch_size: int = 64,
                             jobs: int = 1) -> ClassProbMap:
    """Classify the clamped window around every grid cell.

    Cells are evaluated in row-major batches of ``batch_size``; with
    ``batch_size=1`` every cell goes through exactly the same call as
    :func:`gazeattend.model.classify_patch`. ``jobs > 1`` evaluates batches on
    a thread pool; assembly order stays fixed.
    """
    window = model.spec.input_side if window is None else int(window)
    stride = model.spec.total_stride if stride is None else int(stride)
    height, width = image.shape[:2]
    if window != model.spec.input_side:
        raise ConfigError(f"window {window} differs from the classifier input side {model.spec.input_side}")
    if window > min(width, height):
        raise DataError(f"window {window} larger than the {width}x{height} frame")
    geometry = GridGeometry.for_frame(width, height, stride, window)
    cells = [(r, c) for r in range(geometry.rows) for c in range(geometry.cols)]
    chunks = [cells[i:i + batch_size] for i in range(0, len(cells), batch_size)]

    def run(chunk):
        return model.predict_proba(_crop_cells(image, geometry, chunk))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    probs = np.concatenate(parts).reshape(geometry.rows, geometry.cols, -1)
    return ClassProbMap(geometry, probs)


# ---------------------------------------------------------------------------
# fully convolutional conversion


class DenseClassifier(nn.Module):
    """Feature extractor followed by a 1x1 convolution in place of mean + linear."""

    def __init__(self, features: nn.Module, dim: int, num_classes: int):
        super().__init__()
        self.features = features
        self.head = nn.Conv2d(dim, num_classes, kernel_size=1)

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class DenseModel:
    net: DenseClassifier
    spec: ClassifierSpec
    preprocess: Preprocessor
    class_names: List[str]
    train_seed: Optional[int] = None
    history: Dict[str, list] = field(default_factory=dict)

    kind = "dense"

    def logits(self, image: np.ndarray) -> torch.Tensor:
        """Logits grid (C, rows, cols) for one uint8 frame, padded to the stride."""
        return self.net(pad_to_stride(self.preprocess(image), self.spec.total_stride))[0]

    def patch_proba(self, patches: np.ndarray) -> np.ndarray:
        """Softmax of the spatially averaged logits grid of each (unpadded) patch."""
        self.net.eval()
        with torch.no_grad():
            logits = self.net(self.preprocess(patches)).mean(dim=(2, 3))
        return F.softmax(logits.double(), dim=1).numpy()

    def save(self, out_dir) -> Path:
        return save_artifact(self, out_dir)


def pad_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Zero-pad (N, C, H, W) on the right/bottom up to the next multiple of ``stride``."""
    h, w = x.shape[2:]
    return F.pad(x, (0, (-w) % stride, 0, (-h) % stride))


def convert_to_fully_convolutional(model: PatchModel) -> DenseModel:
    net = model.net
    head = getattr(net, "head", None)
    if not isinstance(net, PatchClassifier) or not isinstance(head, nn.Linear):
        raise ConfigError("model does not end with global average pooling and a linear layer")
    dense = DenseClassifier(copy.deepcopy(net.features), head.in_features, head.out_features)
    with torch.no_grad():
        dense.head.weight.copy_(head.weight.detach().view(*head.weight.shape, 1, 1))
        dense.head.bias.copy_(head.bias.detach())
    dense.eval()
    return DenseModel(dense, copy.deepcopy(model.spec), model.preprocess, list(model.class_names),
                      model.train_seed, {})


def load_dense_model(model_dir) -> DenseModel:
    meta = read_meta(model_dir)
    spec = ClassifierSpec(**meta["spec"])
    spec.pretrained = None
    pre = meta["preprocessing"]
    preprocess = Preprocessor(pre["mean"], pre["std"])
    state = torch.load(Path(model_dir) / WEIGHTS_FILE, map_location="cpu")
    features, dim = build_features(spec)
    if meta["kind"] == "patch":
        net = PatchClassifier(features, dim, spec.num_classes)
        net.load_state_dict(state)
        patch = PatchModel(net, spec, preprocess, meta["class_names"], meta.get("train_seed"))
        return convert_to_fully_convolutional(patch)
    net = DenseClassifier(features, dim, spec.num_classes)
    net.load_state_dict(state)
    net.eval()
    return DenseModel(net, spec, preprocess, meta["class_names"], meta.get("train_seed"),
                      meta.get("history", {}))


def dense_inference(dense: DenseModel, image: np.ndarray) -> ClassProbMap:
    height, width = image.shape[:2]
    stride = dense.spec.total_stride
    if height < stride or width < stride:
        raise DataError(f"frame {width}x{height} smaller than one backbone stride ({stride})")
    geometry = GridGeometry.for_frame(width, height, stride, dense.spec.input_side)
    dense.net.eval()
    with torch.no_grad():
        logits = dense.logits(image)
    if logits.shape[1] < geometry.rows or logits.shape[2] < geometry.cols:
        raise DataError(f"backbone produced a {tuple(logits.shape[1:])} grid, expected "
                        f"{geometry.rows}x{geometry.cols}")
    logits = logits[:, :geometry.rows, :geometry.cols]
    probs = F.softmax(logits.double(), dim=0).permute(1, 2, 0).numpy()
    return ClassProbMap(geometry, probs)


# ---------------------------------------------------------------------------
# upsampling


def _cell_index(geometry: GridGeometry):
    width, height = geometry.frame_size
    rows = np.minimum(np.arange(height) // geometry.stride, geometry.rows - 1)
    cols = np.minimum(np.arange(width) // geometry.stride, geometry.cols - 1)
    return rows, cols


def upsample_to_mask(prob_map: ClassProbMap) -> SegmentationMask:
    """Per-cell argmax expanded to frame resolution by nearest neighbour."""
    rows, cols = _cell_index(prob_map.geometry)
    labels = prob_map.argmax().astype(np.int64)[np.ix_(rows, cols)]
    return SegmentationMask(labels, prob_map.geometry.frame_size)


def upsample_probs(prob_map: ClassProbMap, class_id: Optional[int] = None,
                   mode: str = "nearest") -> np.ndarray:
    """Probabilities at frame resolution: H x W x C, or H x W for one ``class_id``."""
    probs = prob_map.probs if class_id is None else prob_map.probs[:, :, class_id:class_id + 1]
    if mode == "nearest":
        rows, cols = _cell_index(prob_map.geometry)
        out = probs[np.ix_(rows, cols)]
    elif mode == "bilinear":
        width, height = prob_map.geometry.frame_size
        t = torch.from_numpy(np.ascontiguousarray(probs.transpose(2, 0, 1)))[None]
        scaled = F.interpolate(t, size=(prob_map.geometry.rows * prob_map.geometry.stride,
                                        prob_map.geometry.cols * prob_map.geometry.stride),
                               mode="bilinear", align_corners=False)
        out = scaled[0, :, :height, :width].permute(1, 2, 0).numpy()
    else:
        raise ConfigError(f"unknown upsampling mode {mode!r}")
    return out[:, :, 0] if class_id is not None else out


# ---------------------------------------------------------------------------
# files

_HEADER = struct.Struct("<I")
MAP_SUFFIX = ".cmap"


def save_prob_map(path, prob_map: ClassProbMap) -> None:
    """Little-endian uint32 header length, JSON header, then row-major float32 probabilities."""
    g = prob_map.geometry
    header = g.to_json()
    header["C"] = prob_map.num_classes
    blob = json.dumps(header, sort_keys=True).encode()
    data = np.ascontiguousarray(prob_map.probs, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(len(blob)))
        fh.write(blob)
        fh.write(data.tobytes())


def load_prob_map(path) -> ClassProbMap:
    raw = Path(path).read_bytes()
    (n,) = _HEADER.unpack_from(raw)
    header = json.loads(raw[_HEADER.size:_HEADER.size + n])
    geometry = GridGeometry(header["rows"], header["cols"], header["stride"], header["window"],
                            tuple(header["frame_size"]))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + n)
    expected = geometry.rows * geometry.cols * header["C"]
    if data.size != expected:
        raise DataError(f"{path}: expected {expected} floats, found {data.size}")
    probs = data.reshape(geometry.rows, geometry.cols, header["C"]).astype(np.float64)
    return ClassProbMap(geometry, probs)


def save_mask(path, mask: SegmentationMask) -> None:
    if mask.labels.max(initial=0) > 255 or mask.labels.min(initial=0) < 0:
        raise DataError("mask PNGs hold at most 256 classes")
    Image.fromarray(mask.labels.astype(np.uint8)).save(path)


def load_mask(path) -> SegmentationMask:
    with Image.open(path) as im:
        labels = np.asarray(im, dtype=np.int64)
    return SegmentationMask(labels, (labels.shape[1], labels.shape[0]))
