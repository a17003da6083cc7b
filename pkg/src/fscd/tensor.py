"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the change-detection networks need are provided.  All
image tensors use the ``N x C x H x W`` layout.  Operations are recorded on
the innermost active :class:`Tape`; outside a tape nothing is recorded and
the ops behave like plain numpy functions::

    with Tape() as tape:
        loss = bce_loss(sigmoid(conv2d(x, w, b, pad=1)), y)
    tape.backward(loss)
"""
from __future__ import annotations

import enum
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .rng import RngStream

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ForwardMode(str, enum.Enum):
    TRAIN = "Train"
    EVAL = "Eval"
    MC_SAMPLE = "McSample"


class Tensor:
    """Array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _register(self, t: Tensor) -> None:
        if t.node_id is None:
            t.node_id = self._ids
            self._ids += 1

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        for p in parents:
            self._register(p)
        self._register(out)
        self.nodes.append(_Node(out, tuple(parents), backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor reachable from ``loss``.

    Nodes are visited in exact reverse recording order.  Op outputs receive
    their gradient for this pass; leaf gradients accumulate across calls
    (clear them with ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    leaves = {}
    for node in tape.nodes:
        for parent in node.parents:
            if id(parent) not in produced:
                leaves[id(parent)] = parent
    for key, g in grads.items():
        leaf = leaves[key]
        g = np.asarray(g, dtype=leaf.data.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2col(xl: np.ndarray, k: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Patch matrix ``(N*ho*wo, k*k*C)`` of a contiguous NHWC array, columns ordered (i, j, c)."""
    n, _, _, c = xl.shape
    s_n, s_h, s_w, s_c = xl.strides
    cols = np.empty((n, ho, wo, k, k * c), dtype=xl.dtype)
    for i in range(k):
        # for a fixed kernel row the (j, c) patch is one contiguous run of k*c values
        cols[:, :, :, i] = as_strided(
            xl[:, i:], shape=(n, ho, wo, k * c), strides=(s_n, s_h * stride, s_w * stride, s_c)
        )
    return cols.reshape(n * ho * wo, k * k * c)


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    out[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``.

    Output size is ``(H + 2*pad - kh)/stride + 1`` and must divide exactly.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D (Cout,Cin,kh,kw), got shape {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d: channel dimension mismatch, input has {cin}, kernel expects {cin_w}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match output channels {cout}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {wp}")
    if (hp - kh) % stride:
        raise ShapeError(f"conv2d: output height ({hp} - {kh})/{stride} + 1 is not an integer")
    if (wp - kw) % stride:
        raise ShapeError(f"conv2d: output width ({wp} - {kw})/{stride} + 1 is not an integer")
    k = kh
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    dtype = np.result_type(x.dtype, w.dtype)

    cols = _im2col(_pad_nhwc(x.data.astype(dtype, copy=False), pad), k, ho, wo, stride)
    w2 = w.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out2 = cols @ w2
    out2 += b.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gl.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(k, k, cin, cout).transpose(3, 2, 0, 1) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and pad <= k - 1:
                # input gradient = correlation of the re-padded output grad with the flipped kernel
                q = k - 1 - pad
                gcols = _im2col(_pad_nhwc(g, q), k, h, wd, 1)
                wf = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, cin)
                gxl = (gcols @ wf).reshape(n, h, wd, cin)
            elif stride == k and pad == 0:
                # non-overlapping windows: scatter is a pure reshape
                gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
                gxl = gcols.transpose(0, 1, 3, 2, 4, 5).reshape(n, ho * k, wo * k, cin)
            else:
                gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                            gcols[:, :, :, i, j]
                        )
                gxl = gxp[:, pad:pad + h, pad:pad + wd]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _wrap(out, (x, w, b), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _wrap(out, (x,), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: inputs must be 4-D, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside the channel dimension")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def back(g):
        return g[:, :ca], g[:, ca:]

    return _wrap(out, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        return (g * pos,)

    return _wrap(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1 / (1 + e), e / (1 + e))
    # keep strictly inside (0, 1) even when saturated
    lo = np.finfo(xd.dtype).tiny
    hi = np.nextafter(xd.dtype.type(1), xd.dtype.type(0))
    s = np.clip(s, lo, hi).astype(xd.dtype, copy=False)

    def back(g):
        return (g * s * (1 - s),)

    return _wrap(s, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)

    def back(g):
        return g, g

    return _wrap(a.data + b.data, (a, b), back)


def sub_abs(a: Tensor, b: Tensor) -> Tensor:
    """``|a - b|`` with subgradient 0 at ties."""
    _check_same("sub_abs", a, b)
    d = a.data - b.data
    sgn = np.sign(d)

    def back(g):
        ga = g * sgn
        return ga, -ga

    return _wrap(np.abs(d), (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def back(g):
        return (g * c,)

    return _wrap(x.data * c, (x,), back)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(x.data.sum(), dtype=x.dtype), (x,), back)


def dropout(x: Tensor, rate: float, rng: RngStream | None, mode: ForwardMode) -> Tensor:
    """Inverted dropout; the identity in Eval mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    mode = ForwardMode(mode)
    if mode is ForwardMode.EVAL or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in Train/McSample mode needs an RngStream")
    keep = rng.generator().random(x.shape) >= rate
    keep_prob = x.dtype.type(1 - rate)
    out = np.where(keep, x.data / keep_prob, x.dtype.type(0))

    def back(g):
        return (np.where(keep, g / keep_prob, g.dtype.type(0)),)

    return _wrap(out, (x,), back)


def bce_loss(p: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"bce_loss: prediction shape {p.shape} != target shape {t.shape}")
    t = t.astype(p.dtype, copy=False)
    lo, hi = p.dtype.type(BCE_CLAMP), p.dtype.type(1 - BCE_CLAMP)
    inside = (p.data >= lo) & (p.data <= hi)
    pc = np.clip(p.data, lo, hi)
    n = p.data.size
    val = -np.mean(t * np.log(pc) + (1 - t) * np.log1p(-pc))

    def back(g):
        dp = (-t / pc + (1 - t) / (1 - pc)) * (g / n)
        return (np.where(inside, dp, 0).astype(p.dtype, copy=False),)

    return _wrap(np.asarray(val, dtype=p.dtype), (p,), back)
