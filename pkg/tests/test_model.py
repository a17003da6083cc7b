import numpy as np
import pytest
from hypothesis import given, strategies as st

from fscd import tensor as T
from fscd.model import (ConfigError, Fusion, ModelConfig, Task, build_model, encode, forward, fuse, layer_table,
                        residual_block)
from fscd.rng import RngStream
from fscd.tensor import ForwardMode, Tape, Tensor


def closed_form_count(chans, blocks, inputs=3, fusion="SiamDiff"):
    m = 2 if fusion == "SiamConcat" else 1
    i = 2 * inputs if fusion == "EarlyFusion" else inputs
    total = 9 * i * chans[0] + chans[0]
    for s in range(1, len(chans)):
        total += 4 * chans[s - 1] * chans[s] + chans[s]
    total += sum(blocks * 2 * (9 * c * c + c) for c in chans)
    below = m * chans[-1]
    for s in range(len(chans) - 2, -1, -1):
        total += 9 * (below + m * chans[s]) * chans[s] + chans[s]
        below = chans[s]
    return total + below + 1


def test_default_parameter_count_matches_closed_form():
    model = build_model(ModelConfig(), RngStream(0))
    assert model.n_params() == closed_form_count([16, 32, 64], 2) == 239_393


@pytest.mark.parametrize("fusion", ["EarlyFusion", "SiamConcat", "SiamDiff"])
def test_parameter_count_per_fusion(fusion):
    cfg = ModelConfig(encoder_channels=[8, 16, 32], fusion=fusion)
    assert build_model(cfg, RngStream(0)).n_params() == closed_form_count([8, 16, 32], 2, fusion=fusion)


def test_same_seed_same_params():
    a = build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(5))
    b = build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(5))
    assert a.checksum() == b.checksum()
    assert build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(6)).checksum() != a.checksum()


def test_he_init_statistics_and_zero_bias():
    model = build_model(ModelConfig(encoder_channels=[32, 64]), RngStream(0), dtype=np.float64)
    w = model.params["encoder.stage1.block0.conv1.weight"].data
    assert abs(w.std() - np.sqrt(2 / (64 * 9))) < 0.05 * np.sqrt(2 / (64 * 9))
    assert abs(w.mean()) < 3 * w.std() / np.sqrt(w.size)
    assert all(not p.data.any() for n, p in model.params.items() if n.endswith(".bias"))


@pytest.mark.parametrize("field,value", [("encoder_channels", []), ("unit_dropout_rate", 1.0),
                                         ("depth_survival_p", 0.0), ("tile_size", 30), ("blocks_per_stage", -1)])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError) as err:
        build_model(ModelConfig(**{field: value}), RngStream(0))
    assert err.value.field == field


def test_layer_table_is_pure_function_of_config():
    assert layer_table(ModelConfig()) == layer_table(ModelConfig())
    names = [n for n, _ in layer_table(ModelConfig())]
    assert len(names) == len(set(names))
    assert all(n.startswith(("encoder.", "decoder.", "head.")) for n in names)


def _block_params(gen, c):
    return {"conv1.weight": Tensor(gen.normal(0, 0.3, (c, c, 3, 3))), "conv1.bias": Tensor(gen.normal(size=c)),
            "conv2.weight": Tensor(gen.normal(0, 0.3, (c, c, 3, 3))), "conv2.bias": Tensor(gen.normal(size=c))}


def test_residual_eval_scaling_matches_raw_composition():
    gen = np.random.default_rng(0)
    x = Tensor(gen.normal(size=(1, 3, 6, 6)))
    p = _block_params(gen, 3)
    h = T.relu(T.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1, 1))
    branch = T.conv2d(h, p["conv2.weight"], p["conv2.bias"], 1, 1).data
    out = residual_block(x, p, 0.5, ForwardMode.EVAL).data
    np.testing.assert_allclose(out, x.data + 0.5 * branch, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(residual_block(x, p, 0.5, ForwardMode.MC_SAMPLE).data, out)


def test_residual_train_drop_is_identity_and_p1_always_keeps():
    gen = np.random.default_rng(1)
    x = Tensor(gen.normal(size=(1, 2, 4, 4)))
    p = _block_params(gen, 2)
    assert residual_block(x, p, 0.5, ForwardMode.TRAIN, keep=False).data.tobytes() == x.data.tobytes()
    plain = residual_block(x, p, 1.0, ForwardMode.EVAL).data
    for i in range(10):
        np.testing.assert_array_equal(residual_block(x, p, 1.0, ForwardMode.TRAIN, RngStream(i)).data, plain)


def test_residual_rejects_bad_survival():
    gen = np.random.default_rng(2)
    x = Tensor(gen.normal(size=(1, 2, 4, 4)))
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            residual_block(x, _block_params(gen, 2), bad, ForwardMode.EVAL)


def test_residual_train_drop_rate_close_to_one_minus_p():
    gen = np.random.default_rng(3)
    x = Tensor(gen.normal(size=(1, 2, 4, 4)))
    p = _block_params(gen, 2)
    dropped = sum(residual_block(x, p, 0.7, ForwardMode.TRAIN, RngStream(9, i)) is x for i in range(2000))
    assert abs(dropped / 2000 - 0.3) < 0.04


def test_fuse_semantics():
    gen = np.random.default_rng(4)
    a, b = Tensor(gen.normal(size=(1, 3, 4, 4))), Tensor(gen.normal(size=(1, 3, 4, 4)))
    assert not fuse(a, a, Fusion.DIFF).data.any()
    assert fuse(a, b, Fusion.CONCAT).shape == (1, 6, 4, 4)
    np.testing.assert_array_equal(fuse(a, b, Fusion.DIFF).data, fuse(b, a, Fusion.DIFF).data)
    with pytest.raises(ValueError):
        fuse(a, b, Fusion.EARLY)


@pytest.mark.parametrize("fusion", ["EarlyFusion", "SiamConcat", "SiamDiff"])
def test_forward_shape_and_range(fusion):
    model = build_model(ModelConfig(fusion=fusion), RngStream(0))
    gen = np.random.default_rng(0)
    out = forward(model, gen.random((1, 3, 64, 64)), gen.random((1, 3, 64, 64)))
    assert out.shape == (1, 1, 64, 64)
    assert np.all((out.data > 0) & (out.data < 1))


def test_forward_rejects_shape_mismatch():
    model = build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(0))
    with pytest.raises(T.ShapeError):
        forward(model, np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 32, 32)))


def test_eval_forward_deterministic():
    model = build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(0))
    x1, x2 = np.random.default_rng(1).random((2, 2, 3, 16, 16))
    assert forward(model, x1, x2).data.tobytes() == forward(model, x1, x2).data.tobytes()


@given(seed=st.integers(0, 2**32))
def test_siamdiff_swap_invariance(seed):
    model = build_model(ModelConfig(encoder_channels=[4, 8], tile_size=16), RngStream(0))
    x1, x2 = np.random.default_rng(seed).random((2, 1, 3, 16, 16))
    assert forward(model, x1, x2).data.tobytes() == forward(model, x2, x1).data.tobytes()


def test_train_equals_eval_without_stochasticity():
    cfg = ModelConfig(encoder_channels=[4, 8], unit_dropout_rate=0.0, depth_survival_p=1.0)
    model = build_model(cfg, RngStream(0))
    x1, x2 = np.random.default_rng(1).random((2, 2, 3, 16, 16))
    train = forward(model, x1, x2, ForwardMode.TRAIN, RngStream(3)).data
    assert train.tobytes() == forward(model, x1, x2).data.tobytes()


def test_weight_tying_is_structural():
    model = build_model(ModelConfig(encoder_channels=[4, 8]), RngStream(0), dtype=np.float64)
    x = Tensor(np.random.default_rng(2).random((1, 3, 16, 16)))
    before = [f.data.copy() for f in encode(model, x, ForwardMode.EVAL)]
    model.params["encoder.stage0.stem.weight"].data[0, 0, 1, 1] += 0.5
    after_t1 = encode(model, x, ForwardMode.EVAL)
    after_t2 = encode(model, x, ForwardMode.EVAL)
    for b, a1, a2 in zip(before, after_t1, after_t2):
        assert not np.array_equal(b, a1.data)
        assert a1.data.tobytes() == a2.data.tobytes()


@pytest.mark.parametrize("fusion", ["EarlyFusion", "SiamConcat", "SiamDiff"])
def test_every_parameter_receives_gradient(fusion):
    cfg = ModelConfig(encoder_channels=[4, 8], blocks_per_stage=1, fusion=fusion)
    model = build_model(cfg, RngStream(0), dtype=np.float64)
    touched = {n: False for n in model.params}
    gen = np.random.default_rng(0)
    for trial in range(5):
        model.zero_grad()
        x1, x2 = gen.random((2, 2, 3, 16, 16))
        y = (gen.random((2, 1, 16, 16)) > 0.5).astype(np.float64)
        with Tape() as tape:
            loss = T.bce_loss(forward(model, x1, x2, ForwardMode.TRAIN, RngStream(trial)), y)
        tape.backward(loss)
        for n, p in model.params.items():
            touched[n] |= p.grad is not None and bool(np.any(p.grad))
    assert all(touched.values()), [n for n, v in touched.items() if not v]


def test_segment_model_single_input():
    cfg = ModelConfig(encoder_channels=[4, 8], task="segment")
    model = build_model(cfg, RngStream(0))
    x = np.random.default_rng(0).random((1, 3, 16, 16))
    assert forward(model, x).shape == (1, 1, 16, 16)
    with pytest.raises(ValueError):
        forward(model, x, x)
    assert cfg.task is Task.SEGMENT
