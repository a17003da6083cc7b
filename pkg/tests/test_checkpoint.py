import struct

import numpy as np
import pytest

from fscd.checkpoint import (MAGIC, BadMagicError, NameSetMismatchError, TruncatedPayloadError,
                             VersionMismatchError, load_checkpoint, save_checkpoint, transfer_weights)
from fscd.model import ModelConfig, build_model, forward, layer_table
from fscd.rng import RngStream


@pytest.fixture
def saved(tmp_path):
    model = build_model(ModelConfig(encoder_channels=[4, 8], blocks_per_stage=1), RngStream(1))
    return model, save_checkpoint(model, tmp_path / "m.fscd")


def test_round_trip_bit_exact(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    assert loaded.config.to_dict() == model.config.to_dict()
    assert list(loaded.params) == list(model.params)
    for name, p in model.params.items():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
    x1, x2 = np.random.default_rng(0).random((2, 1, 3, 16, 16))
    assert forward(loaded, x1, x2).data.tobytes() == forward(model, x1, x2).data.tobytes()


def test_header_layout(saved):
    _, path = saved
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sHI", raw)
    assert magic == MAGIC == b"FSCD" and version == 1
    n_floats = sum(int(np.prod(s)) for _, s in layer_table(ModelConfig(encoder_channels=[4, 8], blocks_per_stage=1)))
    assert len(raw) == 10 + hlen + 4 * n_floats


def test_save_is_byte_deterministic(tmp_path, saved):
    model, path = saved
    assert save_checkpoint(model, tmp_path / "again.fscd").read_bytes() == path.read_bytes()


def test_bad_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    struct.pack_into("<H", raw, 4, 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, 8, 40, -1])
def test_truncation(saved, cut):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(path)


def test_error_classes_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError, NameSetMismatchError}
    assert len(kinds) == 4
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_name_set_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    _, _, hlen = struct.unpack_from("<4sHI", raw)
    header = raw[10:10 + hlen].decode()
    tampered = header.replace("encoder.stage0.stem.weight", "encoder.stage0.stem.wEight")
    raw[10:10 + hlen] = tampered.encode()
    path.write_bytes(bytes(raw))
    with pytest.raises(NameSetMismatchError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.fscd")


def test_transfer_reports_exactly_encoder_names():
    seg_cfg = ModelConfig(encoder_channels=[4, 8], task="segment")
    seg = build_model(seg_cfg, RngStream(0))
    target = ModelConfig(encoder_channels=[4, 8], fusion="SiamDiff")
    model, moved = transfer_weights(seg, target, RngStream(1))
    expected = {n for n, _ in layer_table(seg_cfg)} & {n for n, _ in layer_table(target)}
    expected = {n for n in expected if n.startswith("encoder.")}
    assert set(moved) == expected
    fresh = build_model(target, RngStream(1))
    for name, p in model.params.items():
        src = seg.params[name] if name in expected else fresh.params[name]
        assert p.data.tobytes() == src.data.tobytes()


def test_transfer_skips_shape_mismatch():
    # EarlyFusion stems see 6 input channels, so the 3-channel stem cannot move
    seg = build_model(ModelConfig(encoder_channels=[4, 8], task="segment"), RngStream(0))
    _, moved = transfer_weights(seg, ModelConfig(encoder_channels=[4, 8], fusion="EarlyFusion"), RngStream(1))
    assert "encoder.stage0.stem.weight" not in moved
    assert "encoder.stage1.down.weight" in moved
