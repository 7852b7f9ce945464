import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gazeattend.dataset import load_image
from gazeattend.dense import ClassProbMap, GridGeometry, convert_to_fully_convolutional, dense_inference
from gazeattend.distill import (
    DistillConfig, build_teachers, distill_loss, finetune_kl, kl_divergence, load_teachers,
    select_distill_frames,
)
from gazeattend.errors import ConfigError, DataError


def direct_kl(p, q, eps=1e-8):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / (qi if qi > 0 else eps))
    return total


def simplex(rng, n):
    v = rng.gamma(0.5, size=n)
    return v / v.sum()


class TestKL:
    def test_self_is_zero(self, rng):
        for _ in range(50):
            p = simplex(rng, 16)
            assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_self_is_zero_below_eps(self):
        p = np.array([1 - 3e-9, 1e-9, 2e-9, 0.0])
        assert kl_divergence(p, p) == 0.0

    def test_one_hot_against_uniform(self):
        p = np.eye(16)[3]
        assert kl_divergence(p, np.full(16, 1 / 16)) == pytest.approx(2.7726, abs=1e-4)
        assert kl_divergence(p, np.full(16, 1 / 16)) == pytest.approx(math.log(16), abs=1e-6)

    def test_matches_direct_sum(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 20))
            p, q = simplex(rng, n), simplex(rng, n)
            if rng.random() < 0.3:
                p[rng.integers(n)] = 0.0
                p /= p.sum()
            assert abs(kl_divergence(p, q) - direct_kl(p, q)) <= 1e-9

    @settings(max_examples=100)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12), st.integers(0, 2**32 - 1))
    def test_non_negative(self, raw, seed):
        p = np.array(raw) / sum(raw)
        q = np.random.default_rng(seed).permutation(p)
        assert kl_divergence(p, q) >= -1e-12

    def test_zero_student_probability_is_clamped(self):
        p = np.array([0.5, 0.5])
        assert kl_divergence(p, np.array([1.0, 0.0])) == pytest.approx(
            0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-8))

    @pytest.mark.parametrize("p", [[0.5, 0.6], [1.2, -0.2], [0.3, 0.3]])
    def test_rejects_unnormalised(self, p):
        with pytest.raises(DataError, match="probability"):
            kl_divergence(p, [0.5, 0.5])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DataError):
            kl_divergence([1.0], [0.5, 0.5])

    def test_cell_loss_matches_scalar(self, rng):
        logits = torch.from_numpy(rng.normal(size=(5, 3, 4)))
        teacher = torch.from_numpy(np.stack([simplex(rng, 5) for _ in range(12)], 1).reshape(5, 3, 4))
        student = torch.softmax(logits, 0).numpy()
        cells = [direct_kl(teacher[:, r, c].numpy(), student[:, r, c]) for r in range(3) for c in range(4)]
        assert distill_loss(logits, teacher).item() == pytest.approx(np.mean(cells), abs=1e-9)
        rev = [direct_kl(student[:, r, c], teacher[:, r, c].numpy()) for r in range(3) for c in range(4)]
        assert distill_loss(logits, teacher, "student_teacher").item() == pytest.approx(np.mean(rev), abs=1e-9)


class TestSelectFrames:
    def test_excludes_other_and_is_deterministic(self, small_dataset):
        a = select_distill_frames(small_dataset, n=10, seed=4)
        b = select_distill_frames(small_dataset, n=10, seed=4)
        assert [f.frame_id for f in a] == [f.frame_id for f in b]
        assert len(a) == 10
        train = {f.frame_id for f in small_dataset.split("train")}
        assert all(f.frame_id in train and f.attended_class != small_dataset.other_index for f in a)

    def test_saturates_with_warning(self, small_dataset, caplog):
        with caplog.at_level(logging.WARNING):
            frames = select_distill_frames(small_dataset, n=10_000)
        qualifying = [f for f in small_dataset.split("train")
                      if f.gaze.valid and f.attended_class != small_dataset.other_index]
        assert len(frames) == len(qualifying)
        assert "only" in caplog.text

    def test_no_frames(self, small_dataset):
        from dataclasses import replace

        other = small_dataset.other_index
        frames = tuple(replace(f, attended_class=other) for f in small_dataset.frames)
        with pytest.raises(DataError, match="other"):
            select_distill_frames(replace(small_dataset, frames=frames))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            DistillConfig(direction="both").validate()
        with pytest.raises(ConfigError):
            DistillConfig(learning_rate=0).validate()


@pytest.fixture(scope="module")
def teacher_setup(small_model, small_dataset, tmp_path_factory):
    frames = select_distill_frames(small_dataset, n=4, seed=0)
    out = tmp_path_factory.mktemp("teachers")
    teachers = build_teachers(small_model, frames, out)
    return frames, out, teachers


class TestFinetune:
    def test_teacher_files_round_trip(self, teacher_setup):
        frames, out, teachers = teacher_setup
        loaded = load_teachers(out, [f.frame_id for f in frames])
        for (ia, a), (ib, b) in zip(teachers, loaded):
            assert ia == ib and a.geometry == b.geometry
            np.testing.assert_allclose(a.probs, b.probs, atol=1e-7)
        with pytest.raises(DataError, match="missing"):
            load_teachers(out, ["nope"])

    def test_initial_loss_matches_independent_computation(self, teacher_setup, small_model, small_dataset):
        frames, out, _ = teacher_setup
        teachers = load_teachers(out)
        dense = convert_to_fully_convolutional(small_model)
        tuned = finetune_kl(dense, teachers, DistillConfig(max_epochs=1, patience=1), small_dataset)
        per_frame = []
        for fid, t in teachers:
            student = dense_inference(dense, load_image(small_dataset.frame(fid).image_path)).probs
            rows, cols = t.probs.shape[:2]
            per_frame.append(np.mean([direct_kl(t.probs[r, c], student[r, c])
                                      for r in range(rows) for c in range(cols)]))
        assert tuned.history["mean_kl"][0] == pytest.approx(np.mean(per_frame), rel=1e-6)

    def test_reduces_kl_and_leaves_inputs_alone(self, teacher_setup, small_model, small_dataset):
        frames, out, teachers = teacher_setup
        raw = {p.name: p.read_bytes() for p in out.iterdir()}
        dense = convert_to_fully_convolutional(small_model)
        before = {k: v.clone() for k, v in dense.net.state_dict().items()}
        tuned = finetune_kl(dense, teachers, DistillConfig(max_epochs=4, learning_rate=1e-2),
                            small_dataset)
        h = tuned.history["mean_kl"]
        assert min(h) < h[0]
        assert h[tuned.history["best_epoch"]] == min(h)
        assert tuned.history["frames"] == [f.frame_id for f in frames]
        for k, v in dense.net.state_dict().items():
            assert torch.equal(v, before[k])
        assert {p.name: p.read_bytes() for p in out.iterdir()} == raw
        # batch-norm statistics are frozen
        for (k, v) in tuned.net.state_dict().items():
            if "running" in k:
                assert torch.equal(v, before[k])

    def test_fixed_point(self, small_model, small_dataset):
        dense = convert_to_fully_convolutional(small_model)
        frames = select_distill_frames(small_dataset, n=2)
        own = [(f.frame_id, dense_inference(dense, load_image(f.image_path))) for f in frames]
        tuned = finetune_kl(dense, own, DistillConfig(max_epochs=2, patience=1), small_dataset)
        assert tuned.history["mean_kl"][0] == pytest.approx(0.0, abs=1e-9)
        assert tuned.history["best_epoch"] == 0

    def test_geometry_mismatch(self, small_model, small_dataset):
        dense = convert_to_fully_convolutional(small_model)
        frame = select_distill_frames(small_dataset, n=1)[0]
        bad = ClassProbMap(GridGeometry(2, 2, 32, 64, (64, 64)), np.full((2, 2, 3), 1 / 3))
        with pytest.raises(DataError, match="geometry"):
            finetune_kl(dense, [(frame.frame_id, bad)], DistillConfig(max_epochs=1), small_dataset)

    def test_empty_teachers(self, small_model, small_dataset):
        with pytest.raises(DataError):
            finetune_kl(convert_to_fully_convolutional(small_model), [], DistillConfig(), small_dataset)
