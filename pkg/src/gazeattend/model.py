"""Gaze-patch image classifier.

The network is always ``features -> spatial mean -> linear``; the dense module
relies on that tail to turn the classifier into a fully convolutional model.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .dataset import DatasetManifest, FrameRecord, Patch, filter_valid_gaze, sample_gaze_patch
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

BACKBONES = ("tiny", "resnet18")
WEIGHTS_FILE = "weights.pt"
META_FILE = "model.json"


@dataclass
class ClassifierSpec:
    backbone_id: str = "tiny"
    num_classes: int = 16
    input_side: int = 300
    total_stride: int = 32
    pretrained: Optional[str] = None  # torchvision-format state dict for resnet18

    def validate(self) -> None:
        if self.backbone_id not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone_id!r}; choose from {BACKBONES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_side < self.total_stride:
            raise ConfigError("input_side must be at least one backbone stride")
        if self.total_stride != 32:
            raise ConfigError("both backbones downsample by 32")


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_epochs: int = 60
    patience: int = 5
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    class_weighting: bool = False
    hflip: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


def _conv_bn(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def tiny_features() -> nn.Sequential:
    """Five stride-2 stages (total stride 32), ~160 px receptive field, 64 output channels."""
    return nn.Sequential(
        *_conv_bn(3, 8, 2),
        *_conv_bn(8, 16, 2),
        *_conv_bn(16, 32, 2),
        *_conv_bn(32, 48, 2),
        *_conv_bn(48, 48, 1),
        *_conv_bn(48, 64, 2),
        *_conv_bn(64, 64, 1),
    )


def build_features(spec: ClassifierSpec):
    """Return (feature extractor, channel count)."""
    if spec.backbone_id == "tiny":
        return tiny_features(), 64
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    if spec.pretrained:
        state = torch.load(spec.pretrained, map_location="cpu")
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, _ = net.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("fc.")]
        if missing:
            raise ConfigError(f"pretrained weights lack keys: {missing[:5]}")
    features = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                             net.layer1, net.layer2, net.layer3, net.layer4)
    return features, 512


class PatchClassifier(nn.Module):
    def __init__(self, features: nn.Module, dim: int, num_classes: int):
        super().__init__()
        self.features = features
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class Preprocessor:
    """Per-channel standardisation of uint8 RGB arrays."""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    def __call__(self, images: np.ndarray) -> torch.Tensor:
        """(N, H, W, 3) or (H, W, 3) uint8 -> (N, 3, H, W) float32."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if not arr.flags.writeable:
            arr = arr.copy()
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float().div_(255.0)
        mean = torch.from_numpy(self.mean).view(1, 3, 1, 1)
        std = torch.from_numpy(self.std).view(1, 3, 1, 1)
        return (x - mean) / std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def fit(cls, patches: np.ndarray) -> "Preprocessor":
        x = patches.reshape(-1, 3).astype(np.float64) / 255.0
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-6, std, 1.0))


@dataclass
class PatchModel:
    """A trained classifier plus everything needed to reuse it."""

    net: PatchClassifier
    spec: ClassifierSpec
    preprocess: Preprocessor
    class_names: List[str]
    train_seed: Optional[int] = None
    history: Dict[str, list] = field(default_factory=dict)

    kind = "patch"

    def predict_logits(self, patches: np.ndarray) -> torch.Tensor:
        self.net.eval()
        with torch.no_grad():
            return self.net(self.preprocess(patches))

    def predict_proba(self, patches: np.ndarray) -> np.ndarray:
        return F.softmax(self.predict_logits(patches).double(), dim=1).numpy()

    def save(self, out_dir) -> Path:
        return save_artifact(self, out_dir)


def save_artifact(model, out_dir) -> Path:
    """Weights blob plus a JSON sidecar (spec, preprocessing, classes, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), out / WEIGHTS_FILE)
    meta = {
        "kind": model.kind,
        "spec": asdict(model.spec),
        "preprocessing": model.preprocess.to_json(),
        "class_names": list(model.class_names),
        "train_seed": model.train_seed,
        "history": model.history,
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=1) + "\n")
    return out


def read_meta(model_dir) -> dict:
    path = Path(model_dir) / META_FILE
    if not path.is_file():
        raise DataError(f"no model artifact at {model_dir}")
    return json.loads(path.read_text())


def load_patch_model(model_dir) -> PatchModel:
    meta = read_meta(model_dir)
    if meta["kind"] != "patch":
        raise DataError(f"{model_dir} holds a {meta['kind']!r} model, expected a patch classifier")
    spec = ClassifierSpec(**meta["spec"])
    spec.pretrained = None  # weights come from the artifact
    features, dim = build_features(spec)
    net = PatchClassifier(features, dim, spec.num_classes)
    net.load_state_dict(torch.load(Path(model_dir) / WEIGHTS_FILE, map_location="cpu"))
    net.eval()
    pre = meta["preprocessing"]
    return PatchModel(net, spec, Preprocessor(pre["mean"], pre["std"]), meta["class_names"],
                      meta.get("train_seed"), meta.get("history", {}))


# ---------------------------------------------------------------------------
# training


def collect_patches(frames: Sequence[FrameRecord], side: int):
    """Gaze patches for ``frames`` as (N, side, side, 3) uint8 plus labels."""
    pixels = np.empty((len(frames), side, side, 3), dtype=np.uint8)
    labels = np.empty(len(frames), dtype=np.int64)
    for i, frame in enumerate(frames):
        patch = sample_gaze_patch(frame, side)
        pixels[i] = patch.pixels
        labels[i] = patch.label
    return pixels, labels


def _usable_frames(manifest: DatasetManifest, split: str) -> List[FrameRecord]:
    frames = filter_valid_gaze(manifest).split(split)
    if not frames:
        raise DataError(f"split {split!r} has no frames with valid gaze")
    return frames


def _run_epoch(net, opt, x, y, order, batch_size, hflip, rng, weight):
    net.train()
    total, n = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        xb = x[idx]
        if hflip:
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(3), xb)
        loss = F.cross_entropy(net(xb), y[idx], weight=weight)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
        n += len(idx)
    return total / n


def _eval_loss(net, x, y):
    net.eval()
    with torch.no_grad():
        logits = torch.cat([net(x[i:i + 64]) for i in range(0, len(x), 64)])
    loss = F.cross_entropy(logits, y).item()
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite validation loss {loss}")
    return loss, (logits.argmax(1) == y).float().mean().item()


def train_patch_classifier(manifest: DatasetManifest, split: str, spec: ClassifierSpec,
                           cfg: TrainConfig, out_dir=None) -> PatchModel:
    """Fit the classifier on gaze patches of ``split``.

    Stops when the held-out loss has not improved for ``cfg.patience`` epochs
    and keeps the best weights.
    """
    spec.validate()
    cfg.validate()
    if spec.num_classes != manifest.num_classes:
        raise ConfigError(f"spec has {spec.num_classes} classes, manifest has {manifest.num_classes}")
    frames = _usable_frames(manifest, split)
    pixels, labels = collect_patches(frames, spec.input_side)
    if len(np.unique(labels)) < 2:
        raise DataError(f"split {split!r} covers a single class; need at least two")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    perm = rng.permutation(len(labels))
    n_val = int(round(cfg.val_fraction * len(labels))) if len(labels) >= 10 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    pre = Preprocessor.fit(pixels[train_idx])
    x_all = pre(pixels)
    y_all = torch.from_numpy(labels)
    x_tr, y_tr = x_all[train_idx], y_all[train_idx]
    x_val, y_val = (x_all[val_idx], y_all[val_idx]) if n_val else (x_tr, y_tr)

    weight = None
    if cfg.class_weighting:
        counts = np.bincount(labels[train_idx], minlength=spec.num_classes).astype(np.float64)
        w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / spec.num_classes, 0.0)
        weight = torch.tensor(w, dtype=torch.float32)

    features, dim = build_features(spec)
    net = PatchClassifier(features, dim, spec.num_classes)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)

    history = {"train_loss": [], "val_loss": [], "val_acc": []}
    best_loss, best_state, best_epoch, stale = math.inf, None, 0, 0
    for epoch in range(cfg.max_epochs):
        order = torch.from_numpy(rng.permutation(len(y_tr)))
        train_loss = _run_epoch(net, opt, x_tr, y_tr, order, cfg.batch_size, cfg.hflip, rng, weight)
        val_loss, val_acc = _eval_loss(net, x_val, y_val)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["val_acc"].append(val_acc)
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, train_loss, val_loss, val_acc)
        if val_loss < best_loss - 1e-6:
            best_loss, best_state, best_epoch, stale = val_loss, copy.deepcopy(net.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    history["best_epoch"] = best_epoch
    if best_epoch > 0 and history["train_loss"][best_epoch] >= history["train_loss"][0]:
        log.warning("training loss did not decrease between the first and the best epoch")

    model = PatchModel(net, spec, pre, list(manifest.class_names), cfg.seed, history)
    if out_dir is not None:
        model.save(out_dir)
    return model


# ---------------------------------------------------------------------------
# inference and evaluation


def classify_patch(model: PatchModel, patch) -> np.ndarray:
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    side = model.spec.input_side
    if pixels.shape != (side, side, 3):
        raise DataError(f"patch shape {pixels.shape} does not match input side {side}")
    return model.predict_proba(pixels[None])[0]


@dataclass
class ClassifierReport:
    confusion: np.ndarray  # rows: true class, cols: predicted
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    class_names: List[str]

    def to_json(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "precision": [None if math.isnan(v) else float(v) for v in self.precision],
            "recall": [None if math.isnan(v) else float(v) for v in self.recall],
            "class_names": self.class_names,
        }


def confusion_metrics(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int,
                      class_names: Optional[List[str]] = None) -> ClassifierReport:
    if len(y_true) == 0:
        raise DataError("cannot evaluate on an empty split")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.diag(cm) / cm.sum(axis=0)
        recall = np.diag(cm) / cm.sum(axis=1)
    names = class_names or [str(i) for i in range(num_classes)]
    return ClassifierReport(cm, float(np.trace(cm) / cm.sum()), precision, recall, list(names))


def evaluate_classifier(model: PatchModel, manifest: DatasetManifest, split: str,
                        batch_size: int = 64) -> ClassifierReport:
    frames = _usable_frames(manifest, split)
    y_true, y_pred = [], []
    for start in range(0, len(frames), batch_size):
        pixels, labels = collect_patches(frames[start:start + batch_size], model.spec.input_side)
        y_true.append(labels)
        y_pred.append(model.predict_logits(pixels).argmax(1).numpy())
    return confusion_metrics(np.concatenate(y_true), np.concatenate(y_pred),
                             model.spec.num_classes, list(manifest.class_names))
