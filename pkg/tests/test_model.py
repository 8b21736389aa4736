import numpy as np
import pytest

from conftest import smooth_image
from streamadapt import ContractViolation, InvalidInputError
from streamadapt.model import (
    ENCODER,
    INSTANCE_HEAD,
    Adam,
    ModelConfig,
    PerceptionModel,
    load_checkpoint,
    round_to_float32,
    save_checkpoint,
    sgd_step,
)


def frames(model, n=2, seed=0):
    h, w = model.config.height, model.config.width
    return np.stack([np.stack([smooth_image(h, w, seed=seed + 3 * i + j) for j in range(3)]) for i in range(n)])


def test_zero_input_gives_uniform_logits(tiny_model):
    out = tiny_model.forward(np.zeros((1, 16, 16, 3)), heads=("semantic",))
    assert np.all(out.logits == out.logits[..., :1])


def test_forward_is_deterministic(tiny_model):
    x = frames(tiny_model)
    a, b = tiny_model.forward(x), tiny_model.forward(x)
    for name in ("logits", "center", "offset", "depth", "pose"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("h,w,enc,head", [(16, 16, (4, 6), 6), (8, 24, (3, 5), 4), (64, 96, (8, 16), 16)])
def test_output_shapes(h, w, enc, head):
    model = PerceptionModel(ModelConfig(height=h, width=w, enc_channels=enc, head_channels=head))
    out = model.forward(np.random.default_rng(0).random((2, 3, h, w, 3)))
    assert out.logits.shape == (2, h, w, 8)
    assert out.center.shape == (2, h, w) and out.offset.shape == (2, h, w, 2)
    assert out.depth.shape == (2, h, w) and out.pose.shape == (2, 2, 6)
    cfg = model.config
    assert np.all(out.disparity >= cfg.min_disp) and np.all(out.disparity <= cfg.max_disp)
    np.testing.assert_allclose(out.depth, 1.0 / out.disparity)


def test_default_model_is_small():
    assert PerceptionModel().n_parameters <= 10_000


def test_forward_rejects_bad_shape(tiny_model):
    with pytest.raises(InvalidInputError):
        tiny_model.forward(np.zeros((1, 12, 16, 3)))
    with pytest.raises(InvalidInputError):
        tiny_model.forward(np.zeros((1, 16, 16, 3)), heads=("pose",))
    with pytest.raises(InvalidInputError):
        ModelConfig(height=10)


def test_semantic_bias_gradient_is_pixel_count(tiny_model):
    out = tiny_model.forward(frames(tiny_model, n=1)[:, -1], heads=("semantic",))
    grads = tiny_model.backward(out, {"logits": np.ones_like(out.logits)})
    # bilinear upsampling weights of each output pixel sum to one
    np.testing.assert_allclose(grads["sem2.b"], np.full(8, 16 * 16), rtol=1e-12)


def test_all_frozen_gives_zero_gradients(tiny_model):
    model = tiny_model.freeze(tiny_model.params)
    out = model.forward(frames(model))
    grads = model.backward(out, {"logits": np.ones_like(out.logits), "depth": np.ones_like(out.depth),
                                 "pose": np.ones_like(out.pose)})
    assert all(not np.any(g) for g in grads.values())


def test_backward_needs_forward_cache(tiny_model):
    from streamadapt.model import ModelOutputs

    with pytest.raises(ContractViolation):
        tiny_model.backward(ModelOutputs(), {})


def test_feature_embed_properties(tiny_model):
    img = smooth_image(16, 16, seed=1)
    a, b = tiny_model.feature_embed(img), tiny_model.feature_embed(img.copy())
    assert np.array_equal(a, b) and a.shape == (6,)
    shifted = np.roll(img, 1, axis=1)
    c = tiny_model.feature_embed(shifted)
    assert a @ c / (np.linalg.norm(a) * np.linalg.norm(c)) > 0.9
    zero_bias = {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in tiny_model.params.items()}
    assert not np.any(tiny_model.feature_embed(np.zeros((16, 16, 3)), zero_bias))


def test_adam_first_step_is_learning_rate():
    params = {"x": np.array([1.0])}
    Adam(0.1).step(params, {"x": np.array([1.0])})
    assert params["x"][0] == pytest.approx(0.9, abs=1e-6)


def test_zero_gradients_and_frozen_arrays_do_not_move(tiny_model):
    params = {k: v.copy() for k, v in tiny_model.params.items()}
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    sgd_step(params, zero, 0.1)
    assert all(np.array_equal(params[k], tiny_model.params[k]) for k in params)
    ones = {k: np.ones_like(v) for k, v in params.items()}
    sgd_step(params, ones, 0.1, frozen=ENCODER)
    assert all(np.array_equal(params[k], tiny_model.params[k]) for k in ENCODER)
    assert not np.array_equal(params["sem2.b"], tiny_model.params["sem2.b"])


def test_non_finite_gradient_is_rejected():
    params = {"x": np.array([1.0, 2.0])}
    opt = Adam(0.1)
    assert not opt.step(params, {"x": np.array([np.nan, 1.0])})
    assert params["x"].tolist() == [1.0, 2.0] and opt.t == 0


def test_checkpoint_round_trip(tmp_path, tiny_model):
    model = PerceptionModel(tiny_model.config, round_to_float32(tiny_model.params), seed=3)
    model.freeze(ENCODER + INSTANCE_HEAD)
    save_checkpoint(model, tmp_path / "ck", {"note": "x"})
    loaded, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"note": "x"}
    assert loaded.config == model.config and loaded.frozen == model.frozen
    assert loaded.parameter_hash() == model.parameter_hash()
    raw = np.fromfile(tmp_path / "ck" / "arrays.bin", dtype="<f4")
    assert raw.size == model.n_parameters
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_checkpoint(tmp_path / "missing")


def test_parameter_hash_detects_changes(tiny_model):
    h = tiny_model.parameter_hash()
    other = tiny_model.copy()
    other.params["sem2.b"][0] += 1e-12
    assert other.parameter_hash() != h
    assert tiny_model.parameter_hash() == h
