import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_image
from streamadapt import InvalidInputError, UnusableFrameError
from streamadapt.imaging import CameraIntrinsics
from streamadapt.losses import (
    LossWeights,
    adaptation_total_loss,
    batch_depth_loss,
    bootstrapped_ce,
    instance_loss,
    instance_targets,
    photometric_loss,
)

K = CameraIntrinsics(12.0, 12.0, 7.5, 5.5)


def log_softmax_ce(logits, label):
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def test_static_scene_has_zero_reprojection():
    img = smooth_image(12, 16, seed=0)
    depth = np.random.default_rng(0).uniform(1.0, 5.0, size=(12, 16))
    r = photometric_loss((img, img, img), depth, np.zeros((2, 6)), K)
    # exact up to the round-off of projecting and unprojecting each pixel
    assert r.reprojection < 1e-12
    assert r.valid.all()


def test_constant_disparity_has_zero_smoothness():
    img = smooth_image(12, 16, seed=1)
    r = photometric_loss((img, img, img), np.full((12, 16), 4.0), np.zeros((2, 6)), K)
    assert r.smoothness == 0.0 and r.value == 0.0


def test_photometric_depth_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    frames = [smooth_image(8, 8, seed=s) for s in (3, 4, 5)]
    k = CameraIntrinsics(8.0, 8.0, 3.5, 3.5)
    depth = rng.uniform(2.0, 4.0, size=(8, 8))
    poses = np.array([[0.01, -0.02, 0.005, 0.05, -0.03, 0.02], [-0.01, 0.01, 0.0, -0.04, 0.02, -0.03]])
    base = photometric_loss(frames, depth, poses, k)
    h = 1e-6
    checked = 0
    for idx in np.ndindex(8, 8):
        d = depth.copy()
        d[idx] += h
        plus = photometric_loss(frames, d, poses, k)
        d[idx] -= 2 * h
        minus = photometric_loss(frames, d, poses, k)
        if not all(np.array_equal(a, b) for a, b in zip(plus.branches, minus.branches)):
            continue
        numeric = (plus.value - minus.value) / (2 * h)
        exact = base.grad_depth[idx]
        assert abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-6) < 1e-4
        checked += 1
    assert checked > 32
    # pose gradient
    for j, c in np.ndindex(2, 6):
        p = poses.copy()
        p[j, c] += h
        plus = photometric_loss(frames, depth, p, k).value
        p[j, c] -= 2 * h
        minus = photometric_loss(frames, depth, p, k).value
        numeric = (plus - minus) / (2 * h)
        assert abs(numeric - base.grad_pose[j, c]) / max(abs(numeric), 1e-6) < 1e-4


def test_photometric_errors():
    img = smooth_image(6, 6, seed=6)
    k = CameraIntrinsics(6.0, 6.0, 2.5, 2.5)
    with pytest.raises(InvalidInputError):
        photometric_loss((img, img, img), np.zeros((6, 6)), np.zeros((2, 6)), k)
    with pytest.raises(InvalidInputError):
        photometric_loss((img, img, img), np.ones((5, 6)), np.zeros((2, 6)), k)
    # moving far sideways pushes every pixel out of both neighbours
    poses = np.array([[0, 0, 0, 100.0, 0, 0], [0, 0, 0, 100.0, 0, 0]])
    with pytest.raises(UnusableFrameError):
        photometric_loss((img, img, img), np.ones((6, 6)), poses, k)


def test_batch_depth_loss_examples():
    assert batch_depth_loss([1.0] * 5).value == 1.0
    agg = batch_depth_loss([1.0, 2.0, 3.0, 4.0, 5.0], online_motion=0.0, threshold=0.03)
    assert agg.value == 3.5 and agg.gated
    assert agg.weights.tolist() == [0.0, 0.25, 0.25, 0.25, 0.25]
    single = batch_depth_loss([2.0], online_motion=0.0)
    assert single.value == 0.0 and single.gated
    unusable = batch_depth_loss([None, 2.0, 4.0], online_motion=1.0)
    assert unusable.value == 3.0 and unusable.gated
    with pytest.raises(InvalidInputError):
        batch_depth_loss([1.0, None])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=5, max_size=5), st.floats(0.0, 0.1))
def test_batch_depth_loss_matches_direct_formula(losses, motion):
    threshold = 0.03
    keep = [motion >= threshold] + [True] * 4
    expected = sum(v for v, k in zip(losses, keep) if k) / sum(keep)
    assert batch_depth_loss(losses, motion, threshold).value == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_bootstrapped_ce_examples():
    labels = np.array([[0, 1], [2, 1]])
    perfect = np.eye(3)[labels] * 50.0
    assert bootstrapped_ce(perfect, labels, 0.2).value < 1e-20
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(4, 4, 5))
    lab = rng.integers(0, 5, size=(4, 4))
    per_pixel = [log_softmax_ce(logits[i, j], lab[i, j]) for i, j in np.ndindex(4, 4)]
    assert bootstrapped_ce(logits, lab, 1.0).value == pytest.approx(np.mean(per_pixel), rel=1e-12)
    assert bootstrapped_ce(logits, lab, 0.25).value == pytest.approx(np.mean(sorted(per_pixel)[-4:]), rel=1e-12)


def test_bootstrapped_ce_ignores_255_and_rejects_all_ignore():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 3, 4))
    lab = rng.integers(0, 4, size=(3, 3))
    lab[0] = 255
    per_pixel = [log_softmax_ce(logits[i, j], lab[i, j]) for i, j in np.ndindex(3, 3) if lab[i, j] != 255]
    r = bootstrapped_ce(logits, lab, 1.0)
    assert r.value == pytest.approx(np.mean(per_pixel), rel=1e-12)
    assert np.all(r.grad_logits[0] == 0)
    with pytest.raises(InvalidInputError):
        bootstrapped_ce(logits, np.full((3, 3), 255), 0.5)
    with pytest.raises(InvalidInputError):
        bootstrapped_ce(logits, np.full((3, 3), 9), 0.5)


def test_bootstrapped_ce_gradient():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(4, 4, 3))
    lab = rng.integers(0, 3, size=(4, 4))
    r = bootstrapped_ce(logits, lab, 0.5)
    h = 1e-6
    for idx in [(0, 0, 1), (2, 3, 0), (3, 1, 2)]:
        lp = logits.copy()
        lp[idx] += h
        lm = logits.copy()
        lm[idx] -= h
        num = (bootstrapped_ce(lp, lab, 0.5).value - bootstrapped_ce(lm, lab, 0.5).value) / (2 * h)
        assert num == pytest.approx(r.grad_logits[idx], abs=1e-8)


def test_instance_loss_examples():
    z = np.zeros((6, 6))
    assert instance_loss(z, np.zeros((6, 6, 2)), np.zeros((6, 6), dtype=int)).value == 0.0
    inst = np.zeros((6, 6), dtype=int)
    inst[1:4, 2:5] = 1
    heat, off, _, centers = instance_targets(inst)
    assert centers[1] == (2.0, 3.0)
    assert instance_loss(heat, off, inst).value == 0.0


def test_instance_loss_matches_per_pixel_recomputation():
    rng = np.random.default_rng(10)
    inst = np.zeros((6, 7), dtype=int)
    inst[2:5, 1:4] = 3
    center = rng.random((6, 7))
    offset = rng.normal(size=(6, 7, 2))
    w = LossWeights()
    heat = np.zeros((6, 7))
    target_off = np.zeros((6, 7, 2))
    for y, x in np.ndindex(6, 7):
        heat[y, x] = math.exp(-((y - 3.0) ** 2 + (x - 2.0) ** 2) / (2 * w.center_sigma**2))
        if inst[y, x]:
            target_off[y, x] = (3.0 - y, 2.0 - x)
    mse = np.mean([(center[y, x] - heat[y, x]) ** 2 for y, x in np.ndindex(6, 7)])
    l1 = sum(abs(offset[y, x, c] - target_off[y, x, c]) for y, x in np.ndindex(6, 7) for c in range(2)
             if inst[y, x]) / (2 * 9)
    r = instance_loss(center, offset, inst, w)
    assert r.value == pytest.approx(w.lambda_center * mse + w.lambda_offset * l1, rel=1e-12)


def test_total_loss_examples():
    assert adaptation_total_loss([0.0], [0.0], 0.0, online_motion=1.0).total == 0.0
    t = adaptation_total_loss([1.0], [2.0], 3.0, online_motion=1.0)
    assert t.total == 6.0 and t.terms == {"depth": 1.0, "source_ce": 2.0, "mixed_ce": 3.0}
    t = adaptation_total_loss([1.0, 2.0, 3.0], [2.0, 4.0], None, online_motion=0.0)
    assert t.total == 2.5 + 3.0 and t.gated and t.source_weight == 0.5 and t.mixed_weight == 0.0


def test_loss_weights_validation():
    with pytest.raises(InvalidInputError):
        LossWeights(lambda_pr=-1.0)
    with pytest.raises(InvalidInputError):
        LossWeights(bootstrap_fraction=0.0)
