import shutil

import numpy as np
import pytest

from streamadapt import InvalidInputError
from streamadapt.data import (
    CLASS_NAMES,
    STOCK_DOMAINS,
    THING_CLASSES,
    DomainSpec,
    generate_domain,
    load_sequence,
    read_classes,
    read_intrinsics,
    relative_pose,
    render_sequence,
    stock_domain,
)
from streamadapt.imaging import CameraIntrinsics, synthesize_view, to_uint8
from streamadapt.losses import photometric_loss

SMALL = dict(height=16, width=24, intrinsics=CameraIntrinsics(20.0, 20.0, 11.5, 7.5))


def small(name="domain-urban-a", **changes):
    return stock_domain(name, **{**SMALL, **changes})


def test_zero_density_has_no_instances():
    seq = render_sequence(small(object_density=0.0, n_frames=5))
    assert not np.any(seq.instance)
    assert not np.isin(seq.semantic, THING_CLASSES).any()


def test_stock_domains_contain_every_class(source_seq, target_seq):
    for seq in (source_seq, target_seq):
        assert set(np.unique(seq.semantic)) == set(range(len(CLASS_NAMES)))
        assert np.any(seq.instance)


def test_zero_speed_frames_are_identical_and_loss_vanishes():
    seq = render_sequence(small(speed=0.0, heading_noise=0.0, n_frames=4))
    assert all(np.array_equal(seq.rgb[0], f) for f in seq.rgb)
    s = seq.samples(quantized=False)[0]
    depth = np.where(s.gt_depth > 0, s.gt_depth, 1.0)
    assert photometric_loss(s.frames, depth, np.zeros((2, 6)), s.intrinsics).reprojection < 1e-12


@pytest.mark.parametrize("name", sorted(STOCK_DOMAINS))
def test_ground_truth_warp_reproduces_next_frame(name):
    seq = render_sequence(stock_domain(name, n_frames=8))
    k = seq.spec.intrinsics
    for i in range(1, 8):
        out, valid = synthesize_view(seq.rgb[i - 1], seq.depth[i], relative_pose(seq.poses[i], seq.poses[i - 1]), k)
        assert np.abs(out - seq.rgb[i])[valid].mean() < 0.02


def test_camera_frame_is_right_handed():
    seq = render_sequence(small(n_frames=3))
    for rot, _ in seq.poses:
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)


def test_round_trip_is_lossless(tmp_path):
    rendered = generate_domain(small(n_frames=6), tmp_path / "seq")
    ds = load_sequence(tmp_path / "seq")
    assert len(ds) == 4 and ds.labeled
    assert ds.intrinsics == rendered.spec.intrinsics
    assert ds.class_names == CLASS_NAMES and ds.thing_classes == THING_CLASSES
    for k, s in enumerate(ds):
        i = k + 2
        assert s.sequence_index == i and s.frame_path == f"rgb/{i:06d}.png"
        assert np.array_equal(to_uint8(s.image), to_uint8(rendered.rgb[i]))
        assert np.array_equal(s.semantic, rendered.semantic[i])
        assert np.array_equal(s.instance, rendered.instance[i])
        assert np.abs(s.gt_depth - rendered.depth[i]).max() <= 0.0005 + 1e-12
    # in-memory quantized samples see the same pixels as the files
    mem = rendered.samples()[0]
    assert np.array_equal(mem.image, ds[0].image)


def test_folder_without_labels_is_unlabeled(tmp_path):
    generate_domain(small(n_frames=4), tmp_path / "seq")
    shutil.rmtree(tmp_path / "seq" / "semantic")
    ds = load_sequence(tmp_path / "seq")
    assert not ds.labeled and ds[0].semantic is None and not ds[0].labeled


def test_numeric_sort_restores_order(tmp_path):
    generate_domain(small(n_frames=5), tmp_path / "seq")
    rgb = tmp_path / "seq" / "rgb"
    # rename to unpadded names whose lexicographic order differs from numeric order
    for p in sorted(rgb.iterdir()):
        p.rename(rgb / f"{int(p.stem) * 5}.png")
    for sub in ("semantic", "instance", "depth"):
        for p in sorted((tmp_path / "seq" / sub).iterdir()):
            p.rename(p.parent / f"{int(p.stem) * 5}.png")
    ds = load_sequence(tmp_path / "seq")
    assert ds.frame_ids == [0, 5, 10, 15, 20]
    assert [s.sequence_index for s in ds] == [10, 15, 20]


def test_parse_errors_name_the_file(tmp_path):
    generate_domain(small(n_frames=4), tmp_path / "seq")
    (tmp_path / "seq" / "intrinsics.txt").write_text("1 2 3\n")
    with pytest.raises(InvalidInputError, match="intrinsics.txt"):
        load_sequence(tmp_path / "seq")
    (tmp_path / "seq" / "intrinsics.txt").write_text("20 20 11.5 7.5\n")
    (tmp_path / "seq" / "classes.txt").write_text("0 road stuff\n2 car thing\n")
    with pytest.raises(InvalidInputError, match="classes.txt:2"):
        load_sequence(tmp_path / "seq")
    (tmp_path / "seq" / "classes.txt").unlink()
    (tmp_path / "seq" / "rgb" / "000003.png").write_bytes(b"not a png")
    ds = load_sequence(tmp_path / "seq")
    with pytest.raises(InvalidInputError, match="000003.png"):
        ds[1]
    with pytest.raises(InvalidInputError, match="rgb"):
        load_sequence(tmp_path / "nowhere")


def test_classes_and_intrinsics_readers(tmp_path):
    p = tmp_path / "classes.txt"
    p.write_text("0 road stuff\n1 car thing\n")
    assert read_classes(p) == (("road", "car"), (1,))
    q = tmp_path / "k.txt"
    q.write_text("80 80 47.5 31.5\n")
    assert read_intrinsics(q) == CameraIntrinsics(80.0, 80.0, 47.5, 31.5)


def test_sample_from_path(tmp_path):
    generate_domain(small(n_frames=5), tmp_path / "seq")
    ds = load_sequence(tmp_path / "seq")
    assert ds.sample_from_path("rgb/000003.png").sequence_index == 3
    with pytest.raises(InvalidInputError):
        ds.sample_from_path("rgb/000001.png")


def test_domain_spec_validation():
    k = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    with pytest.raises(InvalidInputError):
        DomainSpec("x", k, n_frames=2)
    with pytest.raises(InvalidInputError):
        DomainSpec("x", k, object_density=-1.0)
    with pytest.raises(InvalidInputError):
        stock_domain("nope")


def test_rendering_is_deterministic():
    a = render_sequence(small(n_frames=4))
    b = render_sequence(small(n_frames=4))
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)
