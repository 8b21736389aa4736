import math

import numpy as np
import pytest

from streamadapt import InvalidInputError
from streamadapt.data import render_sequence, stock_domain
from streamadapt.engine import AdaptationConfig, OnlineAdapter, evaluate_model, panoptic_fuse, split_point
from streamadapt.imaging import CameraIntrinsics
from streamadapt.model import ENCODER, INSTANCE_HEAD, ModelConfig, PerceptionModel, load_checkpoint

H, W = 16, 24


def small_samples(name, n_frames, **changes):
    k = CameraIntrinsics(20.0, 20.0, 11.5, 7.5) if name.endswith("a") else CameraIntrinsics(15.0, 15.0, 12.5, 6.5)
    spec = stock_domain(name, n_frames=n_frames, height=H, width=W, intrinsics=k, **changes)
    return render_sequence(spec).samples()


@pytest.fixture(scope="module")
def corpus():
    return {
        "source": small_samples("domain-urban-a", 22),
        "val": small_samples("domain-urban-a", 8, layout_seed=101),
        "target": small_samples("domain-urban-b", 12),
        "target2": small_samples("domain-urban-b", 8, layout_seed=29),
    }


@pytest.fixture
def model():
    return PerceptionModel(ModelConfig(height=H, width=W, enc_channels=(4, 6), head_channels=6), seed=5)


def adapter(model, corpus, **changes):
    cfg = AdaptationConfig(source_capacity=10, target_capacity=4, **changes)
    return OnlineAdapter(model, cfg).fit(corpus["source"])


def test_zero_learning_rate_leaves_weights_but_updates_buffers(model, corpus):
    ad = adapter(model, corpus, learning_rate=0.0)
    h = ad.parameter_hash()
    for s in corpus["target"][:4]:
        ad.partial_fit(s)
    assert ad.parameter_hash() == h == model.parameter_hash()
    assert len(ad.target_buffer_) >= 1 and ad.n_steps_ == 4


def test_disabled_adaptation_equals_static_evaluation(model, corpus):
    ad = adapter(model, corpus, learning_rate=0.0, mixing=False)
    p1, p2 = ad.run_adaptation(corpus["target"])
    n = len(corpus["target"])
    k = split_point(n, 0.7)
    s1 = evaluate_model(model, corpus["target"][:k], 1, p1.domain)
    s2 = evaluate_model(model, corpus["target"][k:], 2, p2.domain)
    assert p1.to_record() == s1.to_record() and p2.to_record() == s2.to_record()


def test_duplicate_frame_is_rejected(model, corpus):
    ad = adapter(model, corpus, learning_rate=0.0)
    s = corpus["target"][0]
    ad.partial_fit(s)
    ad.partial_fit(s)
    assert [r["admitted"] for r in ad.log_] == [True, False]
    assert ad.log_[1]["similarity"] == pytest.approx(1.0)


def test_ten_steps_are_reproducible(model, corpus):
    def run():
        ad = adapter(model, corpus, seed=3)
        for s in corpus["target"][:10]:
            ad.partial_fit(s)
        return ad.parameter_hash(), [s.sequence_index for s in ad.target_buffer_.samples], ad.log_

    a, b = run(), run()
    assert a == b
    assert a[0] != model.parameter_hash()


def test_split_arithmetic_and_step_count(model, corpus):
    assert split_point(100, 0.7) == 70 and split_point(10, 0.7) == 7 and split_point(3, 0.5) == 2
    seq = corpus["target"]
    ad = adapter(model, corpus)
    p1, p2 = ad.run_adaptation(seq)
    n_adapt = math.ceil(0.7 * len(seq))
    assert ad.n_steps_ == n_adapt
    assert p1.n_frames == n_adapt and p2.n_frames == len(seq) - n_adapt
    assert p1.frame_span == (seq[0].sequence_index, seq[n_adapt - 1].sequence_index)
    assert p2.frame_span == (seq[n_adapt].sequence_index, seq[-1].sequence_index)
    with pytest.raises(InvalidInputError):
        ad.run_adaptation([])


def test_protocol3_before_adaptation_equals_pretrained_evaluation(model, corpus):
    ad = adapter(model, corpus)
    assert ad.eval_protocol3(corpus["val"]).to_record() == evaluate_model(model, corpus["val"], 3,
                                                                          corpus["val"][0].domain_tag).to_record()
    with pytest.raises(InvalidInputError):
        ad.eval_protocol3([])


def test_frozen_weights_and_read_only_protocols(model, corpus):
    ad = adapter(model, corpus)
    ad.run_adaptation(corpus["target"])
    for name in ENCODER + INSTANCE_HEAD:
        assert np.array_equal(ad.model_.params[name], model.params[name])
    h = ad.parameter_hash()
    a = ad.eval_protocol3(corpus["val"])
    ad.evaluate(corpus["target"], 2, "t")
    assert ad.parameter_hash() == h
    assert ad.eval_protocol3(corpus["val"]).to_record() == a.to_record()


def test_source_replay_off_shrinks_the_batch(model, corpus):
    ad = adapter(model, corpus, source_replay=False)
    for s in corpus["target"][:3]:
        ad.partial_fit(s)
    admitted = np.cumsum([0] + [r["admitted"] for r in ad.log_[:-1]])
    assert [r["batch"] for r in ad.log_] == [1 + min(2, int(a)) for a in admitted]
    assert all(r["mix_cell"] is not None for r in ad.log_)
    full = adapter(model, corpus)
    full.partial_fit(corpus["target"][0])
    assert full.log_[0]["batch"] == 3 and full.log_[0]["clamped"]


def test_run_log_records(model, corpus):
    ad = adapter(model, corpus)
    ad.partial_fit(corpus["target"][0])
    rec = ad.log_[0]
    for key in ("step", "loss", "loss_depth", "loss_source_ce", "loss_mixed_ce", "gated", "admitted",
                "target_buffer", "source_buffer", "evicted"):
        assert key in rec
    assert rec["loss"] == pytest.approx(rec["loss_depth"] + rec["loss_source_ce"] + rec["loss_mixed_ce"])


def test_multi_domain_report_grid_and_checkpoints(model, corpus, tmp_path):
    ad = adapter(model, corpus)
    reports = ad.run_multi_domain([("t1", corpus["target"]), ("t2", corpus["target2"])], corpus["val"], tmp_path)
    rows = [(r.stage, r.protocol, r.domain) for r in reports]
    assert rows == [
        ("after-t1", 1, "t1"), ("after-t1", 2, "t1"), ("after-t1", 3, corpus["val"][0].domain_tag),
        ("after-t2", 1, "t2"), ("after-t2", 2, "t1"), ("after-t2", 2, "t2"),
        ("after-t2", 3, corpus["val"][0].domain_tag),
    ]
    assert ad.teacher_.alpha == 0.7
    final, extra = load_checkpoint(tmp_path / "after-t2")
    assert extra == {"stage": "after-t2"}
    np.testing.assert_allclose(final.params["sem2.w"], ad.model_.params["sem2.w"], rtol=1e-6)


def test_single_domain_schedule_matches_run_adaptation(model, corpus):
    a = adapter(model, corpus)
    grid = a.run_multi_domain([("t", corpus["target"])], corpus["val"])
    b = adapter(model, corpus)
    p1, p2 = b.run_adaptation(corpus["target"], "t", "after-t")
    p3 = b.eval_protocol3(corpus["val"], "after-t")
    assert [r.to_record() for r in grid] == [p1.to_record(), p2.to_record(), p3.to_record()]


def test_config_validation():
    with pytest.raises(InvalidInputError):
        AdaptationConfig(counts=(2, 2, 2))
    with pytest.raises(InvalidInputError):
        AdaptationConfig(split=1.0)
    with pytest.raises(InvalidInputError):
        AdaptationConfig(alpha_schedule=())
    with pytest.raises(InvalidInputError):
        OnlineAdapter().fit([])


def heads_for(instances, thing=6, n_classes=8):
    """Perfect logits, Gaussian centre peaks and exact offsets for an instance map."""
    h, w = instances.shape
    logits = np.zeros((h, w, n_classes))
    logits[..., 0] = 1.0
    logits[instances > 0] = np.eye(n_classes)[thing] * 2
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    center = np.zeros((h, w))
    offset = np.zeros((h, w, 2))
    for iid in np.unique(instances[instances > 0]):
        m = instances == iid
        cy, cx = yy[m].mean(), xx[m].mean()
        center = np.maximum(center, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0))
        offset[m, 0] = cy - yy[m]
        offset[m, 1] = cx - xx[m]
    return logits, center, offset


def test_fuse_single_instance_with_perfect_heads():
    inst = np.zeros((9, 9), dtype=int)
    inst[2:5, 3:6] = 1
    semantic, instance = panoptic_fuse(*heads_for(inst))
    assert np.array_equal(instance > 0, inst > 0)
    assert set(np.unique(instance)) == {0, 1}
    assert np.all(semantic[inst > 0] == 6)


def test_fuse_without_centres_gives_no_instances():
    inst = np.zeros((6, 6), dtype=int)
    inst[1:3, 1:3] = 1
    logits, center, offset = heads_for(inst)
    _, instance = panoptic_fuse(logits, center * 0.05, offset, threshold=0.1)
    assert not np.any(instance)


def test_fuse_two_instances_matches_brute_force():
    rng = np.random.default_rng(0)
    inst = np.zeros((12, 12), dtype=int)
    # odd-sized boxes put each centroid on a pixel, so each peak is unique
    inst[1:4, 1:4] = 1
    inst[7:10, 6:11] = 2
    logits, center, offset = heads_for(inst)
    offset = offset + rng.normal(0, 0.8, offset.shape)
    _, instance = panoptic_fuse(logits, center, offset)
    peaks = []
    for y, x in np.ndindex(12, 12):
        window = center[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
        if center[y, x] > 0.1 and center[y, x] == window.max():
            peaks.append((y, x))
    assert len(peaks) == 2
    for y, x in zip(*np.nonzero(inst)):
        ty, tx = y + offset[y, x, 0], x + offset[y, x, 1]
        best = min(range(2), key=lambda i: (ty - peaks[i][0]) ** 2 + (tx - peaks[i][1]) ** 2)
        assert instance[y, x] == best + 1


def test_fuse_plateau_keeps_one_centre():
    logits = np.zeros((5, 5, 8))
    logits[..., 6] = 1.0
    center = np.zeros((5, 5))
    center[2, 2] = center[2, 3] = 0.9
    _, instance = panoptic_fuse(logits, center, np.zeros((5, 5, 2)))
    assert set(np.unique(instance)) == {1}
