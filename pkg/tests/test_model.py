import numpy as np
import pytest

from ordicon import model as Mo
from ordicon import nn
from ordicon.gradcheck import module_error
from ordicon.numerics import finite_diff_grad, make_rng, rel_error

SMALL = Mo.EncoderConfig(height=8, width=8, stages=((3, True), (4, False)))


def test_attention_map_range_and_zero_weights():
    rng = make_rng(0)
    block = Mo.AttentionBlock(4, rng)
    f_s = Mo.attention_map(rng.normal(scale=5.0, size=(3, 4, 6, 6)), block, train=True)
    assert f_s.shape == (3, 1, 6, 6)
    assert np.all((f_s > 0) & (f_s < 1))
    zero = Mo.AttentionBlock(4, None)
    for _, layer in nn.iter_layers(zero):
        if isinstance(layer, nn.BatchNorm2d):
            layer.params["beta"][...] = 0
    assert np.all(Mo.attention_map(rng.normal(size=(2, 4, 5, 5)), zero, train=True) == 0.5)


def test_attention_block_gradcheck():
    rng = make_rng(1)
    block = Mo.AttentionBlock(4, rng)
    assert module_error(block, rng.normal(size=(3, 4, 4, 4)), rng) < 1e-5


def test_local_encoder_override_hooks():
    rng = make_rng(2)
    x = rng.uniform(size=(3, 1, 8, 8))
    loc = Mo.LocalEncoder(SMALL, make_rng(3))
    glob = Mo.GlobalEncoder(SMALL, make_rng(3))  # same seed: same backbone weights
    loc.attention_override = 1.0
    assert np.allclose(loc.forward(x, train=False), glob.forward(x, train=False), atol=1e-12)
    loc.attention_override = 0.0
    assert not loc.forward(x, train=False).any()


def test_gated_features_bounded_by_backbone():
    rng = make_rng(4)
    loc = Mo.LocalEncoder(SMALL, rng)
    x = rng.uniform(size=(2, 1, 8, 8))
    loc.forward(x, train=False)
    f_m, f_s = loc._cache
    assert np.all(np.abs(f_m * f_s) <= np.abs(f_m))
    assert np.all((loc.last_map > 0) & (loc.last_map < 1))


@pytest.mark.parametrize("cls", [Mo.LocalEncoder, Mo.GlobalEncoder])
def test_encoder_gradcheck(cls):
    rng = make_rng(5)
    enc = cls(SMALL, rng, input_grad=True)
    # nonzero biases keep pre-activations off the relu kink at exactly 0
    for _, layer, key in Mo.named_params(enc):
        if key in ("b", "beta"):
            layer.params[key] = 0.1 * rng.normal(size=layer.params[key].shape)
    assert module_error(enc, rng.uniform(size=(3, 1, 8, 8)), rng) < 1e-5


def test_global_encoder_constant_and_identical_images():
    enc = Mo.GlobalEncoder(SMALL, make_rng(6))
    x = np.full((3, 1, 8, 8), 0.4)
    out = enc.forward(x, train=False)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])
    img = make_rng(7).uniform(size=(1, 1, 8, 8))
    pair = enc.forward(np.concatenate([img, img]), train=False)
    assert np.array_equal(pair[0], pair[1])


def test_encoder_shape_mismatch():
    enc = Mo.GlobalEncoder(SMALL, make_rng(0))
    with pytest.raises(ValueError):
        enc.forward(np.zeros((2, 1, 6, 8)))


def test_projector():
    rng = make_rng(8)
    proj = Mo.Projector(6, (5, 4), rng)
    z = Mo.project(rng.normal(size=(7, 6)), proj)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)
    assert module_error(proj, rng.normal(size=(4, 6)), rng) < 1e-6
    zero = Mo.Projector(6, (5, 4), None)
    with pytest.raises(nn.DegenerateError, match="degenerate embedding"):
        Mo.project(rng.normal(size=(2, 6)), zero)


def test_fusion_bias_and_order():
    reg = Mo.FusionRegressor((3, 2), (4, 4), None)
    out_layer = reg.net.layers[-1]
    out_layer.params["b"][...] = 2.5
    assert np.all(Mo.fuse_and_regress(np.zeros((5, 3)), np.zeros((5, 2)), reg) == 2.5)
    rng = make_rng(9)
    reg = Mo.FusionRegressor((3, 3), (4, 4), rng)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert not np.allclose(reg.forward(a, b), reg.forward(b, a))
    # concatenation order is (local, global)
    first = reg.net.layers[0]
    xcat = np.concatenate([a, b], axis=1)
    manual = np.maximum(xcat @ first.params["W"] + first.params["b"], 0)
    assert np.allclose(reg.net.layers[1].forward(first.forward(xcat)), manual)
    with pytest.raises(ValueError):
        reg.forward(a, rng.normal(size=(4, 5)))


def test_fusion_gradcheck():
    rng = make_rng(10)
    reg = Mo.FusionRegressor((3, 2), (5, 4), rng)
    fl, fg = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    R = rng.normal(size=4)
    reg.forward(fl, fg)
    gl, gg = reg.backward(R)
    assert rel_error(gl, finite_diff_grad(lambda t: float(reg.forward(t, fg) @ R), fl)) < 1e-6
    assert rel_error(gg, finite_diff_grad(lambda t: float(reg.forward(fl, t) @ R), fg)) < 1e-6


def test_param_count_pinned():
    m = Mo.DCOLModel()
    backbone = (9 * 1 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 32 + 32)
    attention = (9 * 32 * 16 + 16) + 2 * 16 + (9 * 16 + 1) + 2
    projector = (32 * 128 + 128) + (128 * 32 + 32)
    fusion = (64 * 128 + 128) + (128 * 32 + 32) + 33
    expected = 2 * backbone + attention + 2 * projector + fusion
    assert expected == 45764
    assert Mo.param_count(m) == expected < 500_000


def test_full_scale_widths():
    cfg = Mo.ModelConfig.full_scale()
    assert cfg.projector == (1280, 128) and cfg.fusion == (1280, 128)
    assert Mo.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_model_determinism():
    x = make_rng(11).uniform(size=(4, 1, 96, 96))
    a = Mo.DCOLModel(seed=3).predict(x)
    b = Mo.DCOLModel(seed=3).predict(x)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    m = Mo.DCOLModel(seed=4)
    x = make_rng(12).uniform(size=(3, 1, 96, 96)).astype(np.float32)
    # perturb running stats so buffers matter
    m.local.forward(x, train=True)
    before = m.predict(x)
    path = tmp_path / "m.dcol"
    Mo.save_checkpoint(path, Mo.get_state(m), m.cfg.to_dict(), {"seed": 4})
    tensors, cfg, meta = Mo.load_checkpoint(path)
    m2 = Mo.DCOLModel(Mo.ModelConfig.from_dict(cfg), seed=99)
    Mo.set_state(m2, tensors)
    assert meta == {"seed": 4}
    assert np.array_equal(m2.predict(x), before)
    assert Mo.state_checksum(m2) == Mo.state_checksum(m)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.dcol"
    Mo.save_checkpoint(path, {"a": np.ones(3, np.float32)})
    raw = path.read_bytes()
    (tmp_path / "bad1").write_bytes(b"XXXXX\n" + raw[6:])
    (tmp_path / "bad2").write_bytes(raw[:-4])
    for name in ("bad1", "bad2"):
        with pytest.raises(Mo.CheckpointError):
            Mo.load_checkpoint(tmp_path / name)


def test_set_state_errors():
    m = Mo.Projector(4, (3, 2), make_rng(0))
    state = Mo.get_state(m)
    with pytest.raises(KeyError):
        Mo.set_state(m, {})
    bad = dict(state)
    k = next(iter(bad))
    bad[k] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="shape mismatch"):
        Mo.set_state(m, bad)
