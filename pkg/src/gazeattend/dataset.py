"""Gaze-annotated frame collections: manifest I/O, validation, patch sampling
and a synthetic scene generator for desk-scale runs.

Manifest format (one JSON document)::

    {
      "name": "...",
      "classes": ["obj_a", ..., "other"],
      "frame_size": [W, H],
      "splits": {"train": [ids], "test": [ids]},
      "frames": [{"id": "...", "image": "rel/or/abs.png", "gaze": [x, y],
                  "attended": k, "boxes": [[k, x, y, w, h], ...]}]
    }

Image paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import BoundingBox
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

OTHER = "other"
REAL_FRAME_SIZE = (2272, 1278)
DEFAULT_PATCH_SIDE = 300


@dataclass(frozen=True)
class GazeSample:
    x: float
    y: float
    valid: bool = True

    @classmethod
    def checked(cls, x: float, y: float, width: int, height: int) -> "GazeSample":
        return cls(float(x), float(y), gaze_in_bounds(x, y, width, height))

    @property
    def pixel(self) -> Tuple[int, int]:
        """(row, col) of the pixel holding the gaze point."""
        return int(math.floor(self.y)), int(math.floor(self.x))


def gaze_in_bounds(x: float, y: float, width: int, height: int) -> bool:
    # half-open: a gaze at x == width is outside
    if x is None or y is None or not (math.isfinite(x) and math.isfinite(y)):
        return False
    return 0 <= x < width and 0 <= y < height


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    image_path: str
    gaze: GazeSample
    attended_class: int
    gt_boxes: Optional[Tuple[Tuple[int, BoundingBox], ...]] = None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    class_names: Tuple[str, ...]
    frame_width: int
    frame_height: int
    frames: Tuple[FrameRecord, ...]
    splits: Dict[str, Tuple[str, ...]]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def other_index(self) -> int:
        return self.class_names.index(OTHER)

    @property
    def frame_size(self) -> Tuple[int, int]:
        return self.frame_width, self.frame_height

    def frame(self, frame_id: str) -> FrameRecord:
        return self._index()[frame_id]

    def split(self, name: str) -> List[FrameRecord]:
        if name not in self.splits:
            raise DataError(f"manifest has no split {name!r}")
        index = self._index()
        return [index[fid] for fid in self.splits[name] if fid in index]

    def _index(self) -> Dict[str, FrameRecord]:
        # frozen dataclass: cache lazily through object.__setattr__
        cached = self.__dict__.get("_frame_index")
        if cached is None:
            cached = {f.frame_id: f for f in self.frames}
            object.__setattr__(self, "_frame_index", cached)
        return cached


@dataclass
class Patch:
    pixels: np.ndarray  # side x side x 3, uint8
    label: int
    origin: Tuple[int, int]

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# manifest I/O


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    return manifest_from_json(doc, root=path.parent)


def manifest_from_json(doc: dict, root=None) -> DatasetManifest:
    root = Path(root) if root is not None else Path.cwd()
    try:
        classes = tuple(str(c) for c in doc["classes"])
        width, height = (int(v) for v in doc["frame_size"])
        raw_frames = doc["frames"]
        raw_splits = doc["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"manifest schema violation: {exc!r}") from exc

    frames = []
    for raw in raw_frames:
        try:
            gaze_xy = raw.get("gaze")
            if gaze_xy is None:
                gaze = GazeSample(float("nan"), float("nan"), False)
            else:
                gaze = GazeSample.checked(float(gaze_xy[0]), float(gaze_xy[1]), width, height)
            boxes = raw.get("boxes")
            if boxes is not None:
                boxes = tuple((int(b[0]), BoundingBox.from_list(b[1:5])) for b in boxes)
            image = Path(raw["image"])
            frames.append(FrameRecord(
                frame_id=str(raw["id"]),
                image_path=str(image if image.is_absolute() else root / image),
                gaze=gaze,
                attended_class=int(raw["attended"]),
                gt_boxes=boxes,
            ))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"manifest schema violation in frame {raw!r:.80}: {exc!r}") from exc

    splits = {str(k): tuple(str(i) for i in v) for k, v in raw_splits.items()}
    manifest = DatasetManifest(
        name=str(doc.get("name", "")),
        class_names=classes,
        frame_width=width,
        frame_height=height,
        frames=tuple(frames),
        splits=splits,
    )
    validate_manifest(manifest)
    return manifest


def validate_manifest(m: DatasetManifest) -> None:
    if m.num_classes < 2:
        raise DataError(f"need at least 2 classes, got {m.num_classes}")
    if m.class_names.count(OTHER) != 1:
        raise DataError(f'class list must contain exactly one "{OTHER}" entry')
    if m.frame_width <= 0 or m.frame_height <= 0:
        raise DataError(f"frame size must be positive, got {m.frame_width}x{m.frame_height}")

    ids = [f.frame_id for f in m.frames]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate frame ids in manifest")
    for f in m.frames:
        if not 0 <= f.attended_class < m.num_classes:
            raise DataError(f"frame {f.frame_id}: unknown class index {f.attended_class}")
        for cls, box in f.gt_boxes or ():
            if not 0 <= cls < m.num_classes:
                raise DataError(f"frame {f.frame_id}: unknown class index {cls} in boxes")
            if not box.inside(m.frame_width, m.frame_height):
                raise DataError(f"frame {f.frame_id}: box {box.as_list()} leaves the frame")

    known = set(ids)
    for name, members in m.splits.items():
        missing = [i for i in members if i not in known]
        if missing:
            raise DataError(f"split {name!r} references unknown frames: {missing[:5]}")
    for (a, ia), (b, ib) in combinations(m.splits.items(), 2):
        shared = set(ia) & set(ib)
        if shared:
            raise DataError(f"overlapping splits {a!r} and {b!r}: {sorted(shared)[:5]}")


def manifest_to_json(m: DatasetManifest, root=None) -> dict:
    root = Path(root) if root is not None else None

    def rel(p: str) -> str:
        if root is None:
            return p
        try:
            return str(Path(p).relative_to(root))
        except ValueError:
            return p

    frames = []
    for f in m.frames:
        entry = {
            "id": f.frame_id,
            "image": rel(f.image_path),
            "gaze": None if not math.isfinite(f.gaze.x) else [f.gaze.x, f.gaze.y],
            "attended": f.attended_class,
        }
        if f.gt_boxes is not None:
            entry["boxes"] = [[c, *b.as_list()] for c, b in f.gt_boxes]
        frames.append(entry)
    return {
        "name": m.name,
        "classes": list(m.class_names),
        "frame_size": [m.frame_width, m.frame_height],
        "splits": {k: list(v) for k, v in m.splits.items()},
        "frames": frames,
    }


def filter_valid_gaze(manifest: DatasetManifest) -> DatasetManifest:
    kept = tuple(f for f in manifest.frames if f.gaze.valid)
    removed = len(manifest.frames) - len(kept)
    if removed == 0:
        return manifest
    log.info("dropped %d of %d frames with gaze outside the frame", removed, len(manifest.frames))
    if not kept:
        log.warning("no frame of %r has a valid gaze point", manifest.name)
    keep_ids = {f.frame_id for f in kept}
    splits = {k: tuple(i for i in v if i in keep_ids) for k, v in manifest.splits.items()}
    return replace(manifest, frames=kept, splits=splits)


def load_gaze_csv(path) -> Dict[str, Tuple[float, float, int]]:
    """Read a ``frame_id,x,y,label`` gaze log."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"frame_id", "x", "y", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header frame_id,x,y,label")
        for row in reader:
            out[row["frame_id"]] = (float(row["x"]), float(row["y"]), int(row["label"]))
    return out


def apply_gaze_log(manifest: DatasetManifest, gaze_log: Dict[str, Tuple[float, float, int]]) -> DatasetManifest:
    """Overwrite gaze points and attended labels of frames listed in ``gaze_log``."""
    frames = []
    for f in manifest.frames:
        if f.frame_id in gaze_log:
            x, y, label = gaze_log[f.frame_id]
            f = replace(f, gaze=GazeSample.checked(x, y, manifest.frame_width, manifest.frame_height),
                        attended_class=label)
        frames.append(f)
    out = replace(manifest, frames=tuple(frames))
    validate_manifest(out)
    return out


def write_gaze_csv(path, frames: Sequence[FrameRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "x", "y", "label"])
        for f in frames:
            w.writerow([f.frame_id, _num(f.gaze.x), _num(f.gaze.y), f.attended_class])


def _num(v: float):
    return int(v) if float(v).is_integer() else v


# ---------------------------------------------------------------------------
# images and patches


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def window_origin(cx: float, cy: float, side: int, width: int, height: int) -> Tuple[int, int]:
    """Top-left corner of the ``side``-square window centred on (cx, cy), shifted inside the frame."""
    if side > width or side > height:
        raise DataError(f"window {side} does not fit a {width}x{height} frame")
    x0 = int(math.floor(cx - side / 2 + 0.5))
    y0 = int(math.floor(cy - side / 2 + 0.5))
    return min(max(x0, 0), width - side), min(max(y0, 0), height - side)


def sample_gaze_patch(frame: FrameRecord, side: int = DEFAULT_PATCH_SIDE,
                      image: Optional[np.ndarray] = None) -> Patch:
    if image is None:
        image = load_image(frame.image_path)
    height, width = image.shape[:2]
    if not (frame.gaze.valid and gaze_in_bounds(frame.gaze.x, frame.gaze.y, width, height)):
        raise DataError(f"frame {frame.frame_id}: gaze ({frame.gaze.x}, {frame.gaze.y}) is not valid")
    x0, y0 = window_origin(frame.gaze.x, frame.gaze.y, side, width, height)
    return Patch(image[y0:y0 + side, x0:x0 + side].copy(), frame.attended_class, (x0, y0))


def attended_box(frame: FrameRecord, other_index: int) -> Optional[BoundingBox]:
    """Ground-truth box of the attended object, or None for "other" frames.

    With several boxes of the attended class, the smallest one containing the
    gaze wins; failing that, the first listed.
    """
    if frame.attended_class == other_index or not frame.gt_boxes:
        return None
    candidates = [b for c, b in frame.gt_boxes if c == frame.attended_class]
    if not candidates:
        return None
    hits = [b for b in candidates if b.contains(frame.gaze.x, frame.gaze.y)]
    if hits:
        return min(hits, key=lambda b: b.area)
    return candidates[0]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSceneConfig:
    image_size: Tuple[int, int] = (480, 320)
    num_classes: int = 5
    objects_per_frame: Tuple[int, int] = (2, 3)
    shape_kinds: Tuple[str, ...] = ("rectangle", "ellipse")
    object_size: Tuple[int, int] = (80, 140)
    patch_side: int = 64
    color_seed: int = 0
    texture_noise: float = 10.0
    gaze_jitter: float = 4.0
    other_fraction: float = 0.2
    invalid_gaze_fraction: float = 0.0
    min_gap: int = 8
    max_retries: int = 200
    frames_per_split: Dict[str, int] = field(default_factory=lambda: {"train": 200, "test": 50})
    name: str = "synthetic"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.objects_per_frame = tuple(int(v) for v in self.objects_per_frame)
        self.shape_kinds = tuple(self.shape_kinds)
        self.object_size = tuple(int(v) for v in self.object_size)
        self.frames_per_split = {str(k): int(v) for k, v in self.frames_per_split.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["objects_per_frame"] = list(self.objects_per_frame)
        d["shape_kinds"] = list(self.shape_kinds)
        d["object_size"] = list(self.object_size)
        return d

    def validate(self) -> None:
        w, h = self.image_size
        lo, hi = self.object_size
        nmin, nmax = self.objects_per_frame
        if w <= 0 or h <= 0:
            raise ConfigError("image_size must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 1 <= nmin <= nmax:
            raise ConfigError("objects_per_frame must satisfy 1 <= min <= max")
        if nmax > self.num_classes:
            raise ConfigError("objects_per_frame exceeds num_classes (objects in a frame have distinct classes)")
        if not 1 <= lo <= hi or hi > min(w, h):
            raise ConfigError("object_size must satisfy 1 <= min <= max <= min(image_size)")
        bad = set(self.shape_kinds) - {"rectangle", "ellipse"}
        if bad or not self.shape_kinds:
            raise ConfigError(f"unsupported shape kinds: {sorted(bad)}")
        if self.patch_side > min(w, h):
            raise ConfigError("patch_side larger than the frame")
        # smallest object must still be informative inside a patch
        min_area = lo * lo * (math.pi / 4 if "ellipse" in self.shape_kinds else 1.0)
        if min_area < (self.patch_side / 4) ** 2:
            raise ConfigError("smallest object area is below (patch_side/4)^2")
        for frac in (self.other_fraction, self.invalid_gaze_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ConfigError("fractions must lie in [0, 1]")
        if not self.frames_per_split:
            raise ConfigError("frames_per_split is empty")


def class_palette(num_classes: int, color_seed: int) -> np.ndarray:
    """Evenly spaced saturated hues, rotated by the colour seed."""
    offset = np.random.default_rng(color_seed).random()
    colors = []
    for k in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb((offset + k / num_classes) % 1.0, 0.85, 0.9)
        colors.append((r * 255, g * 255, b * 255))
    return np.array(colors, dtype=np.float64)


def _place_boxes(rng, n, cfg: SyntheticSceneConfig) -> Optional[List[Tuple[int, int, int, int]]]:
    w, h = cfg.image_size
    lo, hi = cfg.object_size
    placed: List[Tuple[int, int, int, int]] = []
    for _ in range(cfg.max_retries):
        if len(placed) == n:
            return placed
        bw, bh = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x = int(rng.integers(0, w - bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        g = cfg.min_gap
        if all(x + bw + g <= px or px + pw + g <= x or y + bh + g <= py or py + ph + g <= y
               for px, py, pw, ph in placed):
            placed.append((x, y, bw, bh))
    return placed if len(placed) == n else None


def _shape_mask(kind: str, bw: int, bh: int) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((bh, bw), dtype=bool)
    yy, xx = np.mgrid[0:bh, 0:bw]
    cy, cx = (bh - 1) / 2, (bw - 1) / 2
    return ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0


def render_scene(rng, cfg: SyntheticSceneConfig, palette: np.ndarray, other_index: int):
    """Draw one frame. Returns (rgb uint8, label mask, [(class, BoundingBox)])."""
    w, h = cfg.image_size
    n = int(rng.integers(cfg.objects_per_frame[0], cfg.objects_per_frame[1] + 1))
    for _ in range(cfg.max_retries):
        boxes = _place_boxes(rng, n, cfg)
        if boxes is not None:
            break
    else:
        raise DataError(f"unsatisfiable layout: could not place {n} objects in {w}x{h}")

    gray = rng.uniform(90, 160)
    base = np.empty((h, w, 3))
    base[:] = gray + rng.uniform(-8, 8, size=3)
    labels = np.full((h, w), other_index, dtype=np.uint8)
    classes = rng.choice(cfg.num_classes, size=n, replace=False)
    objects = []
    for (x, y, bw, bh), cls in zip(boxes, classes):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        shape = _shape_mask(kind, bw, bh)
        region = base[y:y + bh, x:x + bw]
        region[shape] = palette[cls]
        labels[y:y + bh, x:x + bw][shape] = cls
        rows, cols = np.nonzero(shape)
        tight = BoundingBox(x + int(cols.min()), y + int(rows.min()),
                            int(cols.max() - cols.min()) + 1, int(rows.max() - rows.min()) + 1)
        objects.append((int(cls), tight))
    base += rng.normal(0.0, cfg.texture_noise, size=base.shape)
    rgb = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    return rgb, labels, objects


def _pick_gaze(rng, cfg, labels, target_class, other_index) -> Tuple[int, int]:
    h, w = labels.shape
    region = labels == target_class
    if target_class == other_index:
        # prefer background far enough from objects that the patch is mostly background
        dist = ndimage.distance_transform_edt(region)
        far = dist >= cfg.patch_side / 4
        if far.any():
            region = far
    rows, cols = np.nonzero(region)
    i = int(rng.integers(len(rows)))
    y, x = int(rows[i]), int(cols[i])
    if cfg.gaze_jitter > 0:
        dx, dy = rng.normal(0.0, cfg.gaze_jitter, size=2)
        jx, jy = int(round(x + dx)), int(round(y + dy))
        if 0 <= jx < w and 0 <= jy < h and labels[jy, jx] == target_class:
            x, y = jx, jy
    return x, y


def generate_synthetic(config: SyntheticSceneConfig, seed: int, out_dir) -> Path:
    """Write images, label masks, manifest.json and gaze.csv under ``out_dir``.

    The output is a pure function of ``(config, seed)``. Returns the manifest path.
    """
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    palette = class_palette(config.num_classes, config.color_seed)
    class_names = [f"class_{k}" for k in range(config.num_classes)] + [OTHER]
    other_index = config.num_classes
    w, h = config.image_size

    frames, splits, gaze_rows = [], {}, []
    for split, count in config.frames_per_split.items():
        ids = []
        for i in range(count):
            fid = f"{split}_{i:05d}"
            rgb, labels, objects = render_scene(rng, config, palette, other_index)
            if rng.random() < config.other_fraction:
                attended = other_index
            else:
                attended = objects[int(rng.integers(len(objects)))][0]
            gx, gy = _pick_gaze(rng, config, labels, attended, other_index)
            if rng.random() < config.invalid_gaze_fraction:
                gx, gy = (w + int(rng.integers(1, 50)), gy) if rng.random() < 0.5 else (-int(rng.integers(1, 50)), gy)
            Image.fromarray(rgb).save(out / "images" / f"{fid}.png")
            Image.fromarray(labels).save(out / "masks" / f"{fid}.png")
            frames.append({
                "id": fid,
                "image": f"images/{fid}.png",
                "gaze": [gx, gy],
                "attended": int(attended),
                "boxes": [[c, *b.as_list()] for c, b in objects],
            })
            gaze_rows.append((fid, gx, gy, int(attended)))
            ids.append(fid)
        splits[split] = ids

    doc = {
        "name": config.name,
        "classes": class_names,
        "frame_size": [w, h],
        "splits": splits,
        "frames": frames,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=1) + "\n")
    with open(out / "gaze.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_id", "x", "y", "label"])
        wr.writerows(gaze_rows)
    return manifest_path


def mask_path_for(frame: FrameRecord) -> Path:
    """Label mask written next to a synthetic frame's image."""
    p = Path(frame.image_path)
    return p.parent.parent / "masks" / p.name
