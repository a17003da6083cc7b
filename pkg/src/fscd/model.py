"""Siamese change-detection network with depth-dropout residual blocks.

Architecture (``S = len(encoder_channels)`` stages)::

    encoder stage 0 : conv3x3 (stem, stride 1) -> relu -> B residual blocks -> relu
    encoder stage s : conv2x2 (stride 2)       -> relu -> B residual blocks -> relu
    fusion          : per stage, |f1 - f2| (SiamDiff) or [f1, f2] (SiamConcat)
    decoder stage s : up2x(d[s+1]) ++ fused[s] -> conv3x3 -> relu -> dropout
    head            : conv1x1 -> sigmoid

EarlyFusion feeds ``[t1, t2]`` through a single encoder with twice the
input channels.  The ``segment`` task is the single-image building
segmenter used for pretraining; its encoder names match the change models.

Parameter count (``c_s`` stage widths, ``m`` = 2 for SiamConcat else 1,
``i`` = input channels, doubled for EarlyFusion)::

    stem        9*i*c_0 + c_0
    down s>0    4*c_{s-1}*c_s + c_s
    blocks      B * 2 * (9*c_s^2 + c_s)          per stage
    decoder     9*(c_{s+1}' + m*c_s)*c_s + c_s   s = S-2 .. 0
    head        c_0 + 1

where ``c_{S-1}' = m*c_{S-1}`` and ``c_s' = c_s`` for decoder outputs.
For the default SiamDiff config ([16, 32, 64], B=2, i=3) this is 239,393.
"""
from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import ForwardMode, ShapeError, Tensor


class Fusion(str, enum.Enum):
    EARLY = "EarlyFusion"
    CONCAT = "SiamConcat"
    DIFF = "SiamDiff"


class Task(str, enum.Enum):
    CHANGE = "change"
    SEGMENT = "segment"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelConfig:
    input_channels: int = 3
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    fusion: Fusion = Fusion.DIFF
    unit_dropout_rate: float = 0.5
    depth_survival_p: float = 0.8
    decoder_stages: int | None = None
    tile_size: int = 64
    task: Task = Task.CHANGE

    def __post_init__(self):
        self.fusion = Fusion(self.fusion)
        self.task = Task(self.task)
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.decoder_stages is None and self.encoder_channels:
            self.decoder_stages = len(self.encoder_channels) - 1

    def validate(self) -> "ModelConfig":
        if self.input_channels < 1:
            raise ConfigError("input_channels", f"must be >= 1, got {self.input_channels}")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels", "must be non-empty")
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError("encoder_channels", f"entries must be >= 1, got {self.encoder_channels}")
        if self.blocks_per_stage < 0:
            raise ConfigError("blocks_per_stage", f"must be >= 0, got {self.blocks_per_stage}")
        if not 0 <= self.unit_dropout_rate < 1:
            raise ConfigError("unit_dropout_rate", f"must lie in [0, 1), got {self.unit_dropout_rate}")
        if not 0 < self.depth_survival_p <= 1:
            raise ConfigError("depth_survival_p", f"must lie in (0, 1], got {self.depth_survival_p}")
        if self.decoder_stages != len(self.encoder_channels) - 1:
            raise ConfigError(
                "decoder_stages",
                f"must mirror the encoder ({len(self.encoder_channels) - 1}), got {self.decoder_stages}",
            )
        factor = 2 ** (len(self.encoder_channels) - 1)
        if self.tile_size < 1 or self.tile_size % factor:
            raise ConfigError("tile_size", f"must be a positive multiple of {factor}, got {self.tile_size}")
        return self

    @property
    def n_stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def encoder_input_channels(self) -> int:
        if self.task is Task.CHANGE and self.fusion is Fusion.EARLY:
            return 2 * self.input_channels
        return self.input_channels

    @property
    def fused_multiplier(self) -> int:
        return 2 if self.task is Task.CHANGE and self.fusion is Fusion.CONCAT else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["task"] = self.task.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        if "encoder_channels" in changes and "decoder_stages" not in changes:
            d["decoder_stages"] = None
        return ModelConfig.from_dict(d)


def layer_table(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical ``(name, shape)`` list; a pure function of the config."""
    config.validate()
    chans = config.encoder_channels
    table = []

    def conv(name, cout, cin, k):
        table.append((f"{name}.weight", (cout, cin, k, k)))
        table.append((f"{name}.bias", (cout,)))

    cin = config.encoder_input_channels
    for s, c in enumerate(chans):
        if s == 0:
            conv("encoder.stage0.stem", c, cin, 3)
        else:
            conv(f"encoder.stage{s}.down", c, chans[s - 1], 2)
        for b in range(config.blocks_per_stage):
            conv(f"encoder.stage{s}.block{b}.conv1", c, c, 3)
            conv(f"encoder.stage{s}.block{b}.conv2", c, c, 3)
    m = config.fused_multiplier
    below = m * chans[-1]
    for s in range(config.n_stages - 2, -1, -1):
        conv(f"decoder.stage{s}.conv", chans[s], below + m * chans[s], 3)
        below = chans[s]
    conv("head", 1, below, 1)
    return table


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(copy.deepcopy(self.config), params)

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(copy.deepcopy(self.config), params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def init_param(name: str, shape: tuple[int, ...], rng: RngStream, dtype=np.float32) -> np.ndarray:
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.child(name).generator().standard_normal(shape) * std).astype(dtype)


def build_model(config: ModelConfig, rng: RngStream, dtype=np.float32) -> Model:
    """He-initialised model; each tensor draws from its own named stream."""
    config.validate()
    params = {
        name: Tensor(init_param(name, shape, rng, dtype), requires_grad=True)
        for name, shape in layer_table(config)
    }
    return Model(config, params)


# ---------------------------------------------------------------------------
# building blocks


def _conv(x: Tensor, params: dict, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.weight"]
    k = w.shape[-1]
    pad = (k - 1) // 2 if stride == 1 else 0
    return T.conv2d(x, w, params[f"{name}.bias"], stride=stride, pad=pad)


def residual_block(
    x: Tensor,
    block_params: dict,
    survival_p: float,
    mode: ForwardMode,
    rng: RngStream | None = None,
    *,
    keep: bool | None = None,
    prefix: str = "",
) -> Tensor:
    """Residual block with depth dropout.

    ``block_params`` maps ``conv1.weight``, ``conv1.bias``, ``conv2.weight``,
    ``conv2.bias`` (optionally behind ``prefix``) to tensors.  In Train mode
    the branch survives with probability ``survival_p``; ``keep`` overrides
    the draw (used so both siamese branches share one decision).
    """
    if not 0 < survival_p <= 1:
        raise ValueError(f"survival_p must lie in (0, 1], got {survival_p}")
    mode = ForwardMode(mode)
    if mode is ForwardMode.TRAIN:
        if keep is None:
            keep = survival_p >= 1 or _draw_keep(rng, survival_p)
        if not keep:
            return x
        return T.add(x, _branch(x, block_params, prefix))
    branch = _branch(x, block_params, prefix)
    if survival_p < 1:
        branch = T.scale(branch, survival_p)
    return T.add(x, branch)


def _draw_keep(rng: RngStream | None, survival_p: float) -> bool:
    if rng is None:
        raise ValueError("depth dropout in Train mode needs an RngStream")
    return bool(rng.generator().random() < survival_p)


def _branch(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.relu(_conv(x, params, f"{prefix}conv1"))
    return _conv(h, params, f"{prefix}conv2")


def fuse(f1: Tensor, f2: Tensor, strategy: Fusion) -> Tensor:
    strategy = Fusion(strategy)
    if f1.shape != f2.shape:
        raise ShapeError(f"fuse: feature shapes {f1.shape} and {f2.shape} differ")
    if strategy is Fusion.CONCAT:
        return T.concat_channels(f1, f2)
    if strategy is Fusion.DIFF:
        return T.sub_abs(f1, f2)
    raise ValueError("fuse: EarlyFusion combines inputs before the encoder, not features")


# ---------------------------------------------------------------------------
# forward pass


def depth_decisions(model: Model, mode: ForwardMode, rng: RngStream | None) -> dict[tuple[int, int], bool]:
    """One keep/drop draw per residual block for this forward pass."""
    cfg = model.config
    out = {}
    for s in range(cfg.n_stages):
        for b in range(cfg.blocks_per_stage):
            if ForwardMode(mode) is ForwardMode.TRAIN and cfg.depth_survival_p < 1:
                out[s, b] = _draw_keep(rng.child("depth", s, b), cfg.depth_survival_p)
            else:
                out[s, b] = True
    return out


def encode(model: Model, x: Tensor, mode: ForwardMode, keeps: dict | None = None) -> list[Tensor]:
    """Feature pyramid of one input; the same parameter tensors serve every call."""
    cfg = model.config
    p = model.params
    keeps = keeps or {}
    feats = []
    h = x
    for s in range(cfg.n_stages):
        if s == 0:
            h = T.relu(_conv(h, p, "encoder.stage0.stem"))
        else:
            h = T.relu(_conv(h, p, f"encoder.stage{s}.down", stride=2))
        for b in range(cfg.blocks_per_stage):
            h = residual_block(
                h, p, cfg.depth_survival_p, mode,
                keep=keeps.get((s, b), True),
                prefix=f"encoder.stage{s}.block{b}.",
            )
        if cfg.blocks_per_stage:
            # without this the last conv2 bias cancels exactly inside |f1 - f2|
            h = T.relu(h)
        feats.append(h)
    return feats


def decode(model: Model, fused: list[Tensor], mode: ForwardMode, rng: RngStream | None) -> Tensor:
    cfg = model.config
    p = model.params
    d = fused[-1]
    for s in range(cfg.n_stages - 2, -1, -1):
        d = T.concat_channels(T.upsample_nearest2x(d), fused[s])
        d = T.relu(_conv(d, p, f"decoder.stage{s}.conv"))
        stream = None if rng is None else rng.child("unit-dropout", s)
        d = T.dropout(d, cfg.unit_dropout_rate, stream, mode)
    return T.sigmoid(_conv(d, p, "head"))


def _as_input(x, dtype, channels: int, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.data.ndim != 4:
        raise ShapeError(f"{name}: expected N x C x H x W, got shape {t.shape}")
    if t.shape[1] != channels:
        raise ShapeError(f"{name}: expected {channels} channels, got {t.shape[1]}")
    if t.dtype != dtype and not t.requires_grad:
        t = Tensor(t.data.astype(dtype))
    return t


def forward(model: Model, t1, t2=None, mode: ForwardMode = ForwardMode.EVAL,
            rng: RngStream | None = None) -> Tensor:
    """Change probability map ``N x 1 x H x W`` for the pair ``(t1, t2)``.

    For a ``segment`` model ``t2`` must be None and the output is the
    building probability of ``t1``.
    """
    cfg = model.config
    mode = ForwardMode(mode)
    if mode is not ForwardMode.EVAL and rng is None:
        raise ValueError(f"{mode.value} forward needs an RngStream")
    dtype = model.dtype
    x1 = _as_input(t1, dtype, cfg.input_channels, "t1")
    factor = 2 ** (cfg.n_stages - 1)
    if x1.shape[2] % factor or x1.shape[3] % factor:
        raise ShapeError(f"t1: spatial size {x1.shape[2:]} must be divisible by {factor}")
    keeps = depth_decisions(model, mode, rng)
    if cfg.task is Task.SEGMENT:
        if t2 is not None:
            raise ValueError("segment models take a single image")
        fused = encode(model, x1, mode, keeps)
    else:
        if t2 is None:
            raise ValueError("change models need both t1 and t2")
        x2 = _as_input(t2, dtype, cfg.input_channels, "t2")
        if x1.shape != x2.shape:
            raise ShapeError(f"t1 shape {x1.shape} differs from t2 shape {x2.shape}")
        if cfg.fusion is Fusion.EARLY:
            fused = encode(model, T.concat_channels(x1, x2), mode, keeps)
        else:
            f1 = encode(model, x1, mode, keeps)
            f2 = encode(model, x2, mode, keeps)
            fused = [fuse(a, b, cfg.fusion) for a, b in zip(f1, f2)]
    return decode(model, fused, mode, rng)


def to_nchw(rasters) -> np.ndarray:
    """Stack ``H x W x C`` rasters (or one raster) into ``N x C x H x W``."""
    arr = np.asarray(rasters)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected H x W x C rasters, got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
