"""Acceptance suite: one test per criterion, summarised at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints a ``[PASS]``/``[FAIL]`` line per criterion.
"""

import math
import os

import numpy as np
import pytest
import torch
from torch import nn

from gazeattend.boxes import Detection
from gazeattend.boxfit import extract_component, fit_box, select_attended_class, select_gaze_box
from gazeattend.dataset import SyntheticSceneConfig, generate_synthetic, load_manifest, sample_gaze_patch
from gazeattend.dense import convert_to_fully_convolutional, dense_inference, sliding_window_inference
from gazeattend.distill import DistillConfig, build_teachers, finetune_kl, kl_divergence, select_distill_frames
from gazeattend.evaluation import IOU_THRESHOLDS, average_precision, map_metrics, timing_benchmark
from gazeattend.model import (ClassifierSpec, PatchClassifier, PatchModel, Preprocessor, TrainConfig,
                              build_features, classify_patch, evaluate_classifier, train_patch_classifier)
from gazeattend.pipeline import eval_frames, fit_boxes, infer_frames, score_detections
from oracles import (ap_oracle, box_oracle, component_oracle, gaze_box_oracle, mode_oracle,
                     random_ap_instance, random_detections, random_gaze, random_mask)

REAL_W, REAL_H = 2272, 1278
OTHER = 4


def untrained(num_classes, side, seed=0):
    torch.manual_seed(seed)
    spec = ClassifierSpec("tiny", num_classes, side)
    features, dim = build_features(spec)
    return PatchModel(PatchClassifier(features, dim, num_classes).eval(), spec,
                      Preprocessor([0.45] * 3, [0.25] * 3), [str(i) for i in range(num_classes)])


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    cfg = SyntheticSceneConfig()
    path = generate_synthetic(cfg, seed=7, out_dir=tmp_path_factory.mktemp("acceptance_synth"))
    return cfg, load_manifest(path)


@pytest.mark.criterion(1, "head linearity and converted-model equivalence")
def test_head_linearity(synthetic):
    cfg, manifest = synthetic
    rng = np.random.default_rng(1)
    linear = nn.Linear(64, 6).double()
    conv = nn.Conv2d(64, 6, 1).double()
    with torch.no_grad():
        conv.weight.copy_(linear.weight.view(6, 64, 1, 1))
        conv.bias.copy_(linear.bias)

        def check(f):
            a = linear(f.mean(dim=(2, 3)))
            b = conv(f).mean(dim=(2, 3))
            assert torch.all((a - b).abs() <= 1e-5 * a.abs().clamp_min(1e-3))

        for _ in range(100):
            h, w = rng.integers(1, 41, size=2)
            check(torch.from_numpy(rng.normal(size=(1, 64, h, w))))

        frames = [f for f in manifest.split("train") if f.gaze.valid][:100]
        assert len(frames) == 100
        model = untrained(manifest.num_classes, cfg.patch_side)
        dense = convert_to_fully_convolutional(model)
        patches = np.stack([sample_gaze_patch(f, cfg.patch_side).pixels for f in frames])
        feats = model.net.features(model.preprocess(patches)).double()
        for i in range(len(feats)):
            check(feats[i:i + 1])
        expected = np.stack([classify_patch(model, p) for p in patches])
    assert np.abs(dense.patch_proba(patches) - expected).max() <= 1e-4


@pytest.mark.criterion(2, "grid law: 2272x1278 at stride 32 gives 40x71")
def test_grid_law():
    model = untrained(16, 300)
    image = np.random.default_rng(2).integers(0, 256, size=(REAL_H, REAL_W, 3), dtype=np.uint8)
    dense_map = dense_inference(convert_to_fully_convolutional(model), image)
    sliding_map = sliding_window_inference(model, image, stride=32)
    assert dense_map.probs.shape == (40, 71, 16)
    assert sliding_map.probs.shape == (40, 71, 16)


@pytest.mark.criterion(3, "dense inference at least 10x faster than sliding window")
@pytest.mark.slow
def test_speed_ordering():
    model = untrained(16, 300)
    dense = convert_to_fully_convolutional(model)
    rng = np.random.default_rng(3)
    frames = [rng.integers(0, 256, size=(REAL_H, REAL_W, 3), dtype=np.uint8) for _ in range(5)]
    timing = timing_benchmark({
        "dense": lambda im: dense_inference(dense, im),
        "sliding": lambda im: sliding_window_inference(model, im, stride=32),
    }, frames, repetitions=1, warmup=1)
    ratio = timing["sliding"] / timing["dense"]
    print(f"sliding {timing['sliding']:.3f} s/frame, dense {timing['dense']:.3f} s/frame, ratio {ratio:.1f}")
    assert ratio >= 10


@pytest.mark.criterion(4, "box fitting matches brute-force oracles on 1000 instances")
@pytest.mark.slow
def test_boxfit_oracles():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        mask = random_mask(rng, max_side=256, num_classes=5)
        w, h = mask.frame_size
        gaze = random_gaze(rng, w, h)
        assert select_attended_class(mask, gaze, OTHER) == mode_oracle(mask.labels, gaze, OTHER)

        # pick a class that occurs so every instance exercises the component search
        cls = int(rng.choice(np.unique(mask.labels)))
        expected = component_oracle(mask.labels, cls, gaze)
        got = extract_component(mask, cls, gaze)
        got_pixels = set(zip(*(a.tolist() for a in np.nonzero(got))))
        assert got_pixels == expected

        assert fit_box(got).as_list() == list(box_oracle(sorted(expected)))

        dets = random_detections(rng, w, h, int(rng.integers(0, 15)))
        assert select_gaze_box(dets, gaze) is gaze_box_oracle(dets, gaze)


@pytest.mark.criterion(5, "AP matches PR-enumeration oracle; perfect gives 1, empty gives 0")
def test_map_oracle():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        dets, gts = random_ap_instance(rng, max_frames=20)
        for k in range(5):
            for t in IOU_THRESHOLDS:
                got, want = average_precision(dets, gts, k, t), ap_oracle(dets, gts, k, t)
                if math.isnan(want):
                    assert math.isnan(got)
                else:
                    worst = max(worst, abs(got - want))
    assert worst <= 1e-6

    _, gts = random_ap_instance(rng, max_frames=20)
    perfect = [(fid, Detection(g[0], g[1], float(rng.random()))) for fid, g in gts.items() if g is not None]
    classes = range(5)
    report = map_metrics(perfect, gts, classes)
    assert report.map == 1.0 and report.map50 == 1.0
    empty = map_metrics([], gts, classes)
    assert empty.map == 0.0 and empty.map50 == 0.0


@pytest.mark.criterion(6, "KL properties")
def test_kl_properties():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        p = rng.dirichlet(np.full(n, 0.5))
        q = rng.dirichlet(np.full(n, 0.5))
        assert kl_divergence(p, p) == 0.0
        assert kl_divergence(p, q) >= -1e-9
    one_hot = np.eye(16)[0]
    assert abs(kl_divergence(one_hot, np.full(16, 1 / 16)) - math.log(16)) <= 1e-6
    assert abs(kl_divergence(one_hot, np.full(16, 1 / 16)) - 2.7726) <= 1e-4


@pytest.mark.criterion(7, "synthetic end-to-end pipeline")
@pytest.mark.slow
def test_synthetic_end_to_end(synthetic):
    cfg, manifest = synthetic
    # five object classes plus the reserved "other"
    assert cfg.num_classes == 5 and manifest.num_classes == 6
    assert len(manifest.split("train")) == 200 and len(manifest.split("test")) == 50

    spec = ClassifierSpec("tiny", manifest.num_classes, cfg.patch_side)
    model = train_patch_classifier(manifest, "train", spec, TrainConfig(seed=0))
    accuracy = evaluate_classifier(model, manifest, "test").accuracy

    frames = eval_frames(manifest, "test")
    other = manifest.other_index

    def map50(m):
        return score_detections(fit_boxes(infer_frames(m, frames), frames, other), manifest, frames).map50

    sliding = map50(model)
    dense = convert_to_fully_convolutional(model)
    before = map50(dense)
    teachers = build_teachers(model, select_distill_frames(manifest, seed=0))
    tuned = finetune_kl(dense, teachers, DistillConfig(seed=0), manifest)
    kl = tuned.history["mean_kl"]
    reduction = 1 - min(kl) / kl[0]
    after = map50(tuned)
    print(f"accuracy {accuracy:.3f}; mAP50 sliding {sliding:.3f}, dense {before:.3f}, "
          f"finetuned {after:.3f}; mean KL {kl[0]:.4f} -> {min(kl):.4f} ({reduction:.1%})")
    assert accuracy >= 0.9
    assert sliding >= 0.5
    assert reduction >= 0.5
    assert after >= before - 0.02


FULL_DATA = os.environ.get("GAZEATTEND_FULL_DATA")
PRETRAINED = os.environ.get("GAZEATTEND_PRETRAINED")
TABLE_TARGETS = {"sliding": (0.19, 0.43), "dense": (0.18, 0.34), "finetuned": (0.19, 0.41)}


@pytest.mark.criterion(8, "optional full-data reproduction (not gating)")
@pytest.mark.skipif(not (FULL_DATA and PRETRAINED),
                    reason="set GAZEATTEND_FULL_DATA=<manifest.json> and GAZEATTEND_PRETRAINED=<resnet18.pth>")
def test_full_reproduction():
    manifest = load_manifest(FULL_DATA)
    spec = ClassifierSpec("resnet18", manifest.num_classes, 300, pretrained=PRETRAINED)
    model = train_patch_classifier(manifest, "train", spec, TrainConfig(seed=0))
    frames = eval_frames(manifest, "test")
    dense = convert_to_fully_convolutional(model)
    tuned = finetune_kl(dense, build_teachers(model, select_distill_frames(manifest)), DistillConfig(), manifest)
    for name, m in (("sliding", model), ("dense", dense), ("finetuned", tuned)):
        r = score_detections(fit_boxes(infer_frames(m, frames), frames, manifest.other_index), manifest, frames)
        target_map, target_map50 = TABLE_TARGETS[name]
        print(f"{name}: mAP {r.map:.3f} (target {target_map}), mAP50 {r.map50:.3f} (target {target_map50})")
        assert abs(r.map - target_map) <= 0.05
        assert abs(r.map50 - target_map50) <= 0.07
