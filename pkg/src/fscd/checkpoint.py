"""Binary checkpoint format.

Layout (little-endian)::

    b"FSCD"            magic
    u16                version (= 1)
    u32                header length in bytes
    header             UTF-8 JSON: {"config": {...}, "layers": [[name, shape], ...]}
    payload            float32 parameters, concatenated in layer order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model, layer_table
from .rng import RngStream
from .tensor import Tensor

MAGIC = b"FSCD"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class NameSetMismatchError(CheckpointError):
    pass


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    table = [(name, list(p.shape)) for name, p in model.params.items()]
    header = json.dumps({"config": model.config.to_dict(), "layers": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return path


def _parse(raw: bytes, path) -> tuple[ModelConfig, list, memoryview]:
    if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
        raise TruncatedPayloadError(f"{path}: truncated payload (file ends inside the magic)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an FSCD checkpoint")
    if len(raw) < _PREFIX.size:
        raise TruncatedPayloadError(f"{path}: truncated payload (header prefix incomplete)")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version mismatch, file has {version}, expected {VERSION}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise TruncatedPayloadError(f"{path}: truncated payload (header incomplete)")
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        layers = [(str(n), tuple(int(d) for d in s)) for n, s in header["layers"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return config, layers, memoryview(raw)[end:]


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    config, layers, payload = _parse(path.read_bytes(), path)
    expected = layer_table(config)
    if [n for n, _ in layers] != [n for n, _ in expected] or [s for _, s in layers] != [s for _, s in expected]:
        want, got = {n for n, _ in expected}, {n for n, _ in layers}
        detail = f"missing {sorted(want - got)[:3]}, unexpected {sorted(got - want)[:3]}" if want != got else "shape/order differs"
        raise NameSetMismatchError(f"{path}: layer table does not match its config ({detail})")
    need = sum(int(np.prod(s)) for _, s in layers) * 4
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise CheckpointError(f"{path}: {len(payload) - need} trailing bytes after payload")
    params = {}
    offset = 0
    for name, shape in layers:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += count * 4
    return Model(config, params)


def transfer_weights(source: Model | str | Path, target_config: ModelConfig, rng: RngStream,
                     prefix: str = "encoder.") -> tuple[Model, list[str]]:
    """Fresh model for ``target_config`` with the source's matching ``prefix`` layers copied in.

    A layer transfers when its name and shape agree in both canonical tables;
    everything else keeps its fresh initialisation.  Returns the model and
    the transferred names in canonical order.
    """
    if not isinstance(source, Model):
        source = load_checkpoint(source)
    model = build_model(target_config, rng)
    moved = []
    for name, p in model.params.items():
        src = source.params.get(name)
        if name.startswith(prefix) and src is not None and src.shape == p.shape:
            p.data = src.data.astype(p.dtype, copy=True)
            moved.append(name)
    return model, moved
