"""KL finetuning of the fully convolutional model against sliding-window maps."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset import DatasetManifest, FrameRecord, filter_valid_gaze, load_image
from .dense import (MAP_SUFFIX, ClassProbMap, DenseModel, load_prob_map, pad_to_stride,
                    save_prob_map, sliding_window_inference)
from .errors import ConfigError, DataError, NumericalError
from .model import PatchModel

log = logging.getLogger(__name__)

EPS = 1e-8
DIRECTIONS = ("teacher_student", "student_teacher")


@dataclass
class DistillConfig:
    num_frames: int = 1659
    batch_size: int = 1
    learning_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    momentum: float = 0.9
    direction: str = "teacher_student"

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")


TeacherSet = List[Tuple[str, ClassProbMap]]


def kl_divergence(p, q, eps: float = EPS, atol: float = 1e-5) -> float:
    """sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0.

    Student entries that underflowed to zero are replaced by ``eps``. Small
    but positive entries are kept: flooring them would make KL(p, p) < 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DataError(f"distributions must be 1-D and equal length, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or abs(v.sum() - 1.0) > atol:
            raise DataError(f"{name} is not a probability vector (sum {v.sum():.6g})")
    q = np.where(q > 0, q, eps)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def cellwise_kl(target: torch.Tensor, pred: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """KL(target || pred) per cell along dim 0; zero entries of ``pred`` become ``eps``."""
    log_pred = torch.log(torch.where(pred > 0, pred, torch.full_like(pred, eps)))
    log_target = torch.log(torch.where(target > 0, target, torch.ones_like(target)))
    return (target * (log_target - log_pred)).sum(dim=0)


def distill_loss(student_logits: torch.Tensor, teacher: torch.Tensor,
                 direction: str = "teacher_student") -> torch.Tensor:
    """Mean cell KL between one teacher map (C, rows, cols) and student logits of the same shape."""
    student = torch.softmax(student_logits.double(), dim=0)
    if direction == "teacher_student":
        kl = cellwise_kl(teacher, student)
    else:
        kl = cellwise_kl(student, teacher)
    return kl.mean()


def select_distill_frames(manifest: DatasetManifest, n: int = 1659, seed: int = 0,
                          split: str = "train") -> List[FrameRecord]:
    """Uniform random sample of at most ``n`` train frames whose attended class is not "other"."""
    other = manifest.other_index
    pool = [f for f in filter_valid_gaze(manifest).split(split) if f.attended_class != other]
    if not pool:
        raise DataError(f'split {split!r} has no frames attending a class other than "other"')
    if n >= len(pool):
        if n > len(pool):
            log.warning("requested %d distillation frames, only %d qualify; using all", n, len(pool))
        return pool
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


def build_teachers(model: PatchModel, frames: Sequence[FrameRecord], out_dir=None,
                   batch_size: int = 64, jobs: int = 1) -> TeacherSet:
    teachers = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        prob_map = sliding_window_inference(model, load_image(frame.image_path),
                                            batch_size=batch_size, jobs=jobs)
        if out is not None:
            save_prob_map(out / f"{frame.frame_id}{MAP_SUFFIX}", prob_map)
        teachers.append((frame.frame_id, prob_map))
    return teachers


def load_teachers(teacher_dir, frame_ids: Optional[Sequence[str]] = None) -> TeacherSet:
    teacher_dir = Path(teacher_dir)
    if frame_ids is None:
        paths = sorted(teacher_dir.glob(f"*{MAP_SUFFIX}"))
    else:
        paths = [teacher_dir / f"{fid}{MAP_SUFFIX}" for fid in frame_ids]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"missing teacher maps: {missing[:5]}")
    return [(p.name[:-len(MAP_SUFFIX)], load_prob_map(p)) for p in paths]


def _prepare(dense: DenseModel, teachers: TeacherSet, manifest: DatasetManifest):
    items = []
    for frame_id, prob_map in teachers:
        image = load_image(manifest.frame(frame_id).image_path)
        height, width = image.shape[:2]
        g = prob_map.geometry
        stride = dense.spec.total_stride
        if (g.stride != stride or g.frame_size != (width, height)
                or (g.rows, g.cols) != (math.ceil(height / stride), math.ceil(width / stride))):
            raise DataError(f"teacher geometry for {frame_id} does not match the dense output grid")
        target = torch.from_numpy(np.ascontiguousarray(prob_map.probs.transpose(2, 0, 1)))
        items.append((frame_id, image, target))
    return items


def _student_logits(model: DenseModel, image, rows, cols):
    x = pad_to_stride(model.preprocess(image), model.spec.total_stride)
    return model.net(x)[0, :, :rows, :cols]


def mean_kl(dense: DenseModel, items, direction: str) -> float:
    dense.net.eval()
    with torch.no_grad():
        losses = [distill_loss(_student_logits(dense, x, *t.shape[1:]), t, direction).item()
                  for _, x, t in items]
    return float(np.mean(losses))


def finetune_kl(dense: DenseModel, teachers: TeacherSet, cfg: DistillConfig,
                manifest: DatasetManifest) -> DenseModel:
    """Return a finetuned copy of ``dense``; ``dense`` and the teachers are left untouched.

    BatchNorm statistics stay frozen: the student runs in eval mode while its
    weights are optimised.
    """
    cfg.validate()
    if not teachers:
        raise DataError("empty teacher set")
    student = copy.deepcopy(dense)
    items = _prepare(student, teachers, manifest)
    net = student.net
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)

    initial = mean_kl(student, items, cfg.direction)
    history = {"mean_kl": [initial]}
    best, best_state, best_epoch, stale = initial, copy.deepcopy(net.state_dict()), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.eval()
        order = rng.permutation(len(items))
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            loss = sum(distill_loss(_student_logits(student, x, *t.shape[1:]), t, cfg.direction)
                       for _, x, t in batch) / len(batch)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite distillation loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        current = mean_kl(student, items, cfg.direction)
        if not math.isfinite(current):
            raise NumericalError(f"non-finite mean KL at epoch {epoch}")
        history["mean_kl"].append(current)
        log.debug("distill epoch %d mean KL %.5f", epoch, current)
        if current < best - 1e-9:
            best, best_state, best_epoch, stale = current, copy.deepcopy(net.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    history["best_epoch"] = best_epoch
    history["frames"] = [fid for fid, _ in teachers]
    return replace(student, history=history)
