"""Central-difference verification of the tensor engine's backward rules."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_model, forward, residual_block
from .rng import RngStream
from .tensor import ForwardMode, Tape, Tensor

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over all input elements of ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.

    ``f`` maps the inputs to a scalar tensor and must be deterministic.
    Inputs are perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    first = np.array(f(*inputs).data, copy=True)
    second = np.array(f(*inputs).data, copy=True)
    if first.tobytes() != second.tobytes():
        raise NonDeterministicError("f returned different values for identical inputs")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(*inputs).data)
            flat[i] = orig - eps
            down = float(f(*inputs).data)
            flat[i] = orig
            cd = (up - down) / (2 * eps)
            a = float(a_flat[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant weight array; turns any op into a scalar probe."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise T.ShapeError(f"weighted_sum: weights {w.shape} vs input {x.shape}")

    def back(g):
        return (g * w,)

    return T._wrap(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), back)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _rand(gen, *shape, lo=-2.0, hi=2.0):
    return Tensor(gen.uniform(lo, hi, size=shape), requires_grad=True)


def toy_config() -> ModelConfig:
    return ModelConfig(encoder_channels=[2, 4], blocks_per_stage=1, tile_size=8,
                       unit_dropout_rate=0.25, depth_survival_p=0.75)


def suite_cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor], float]]:
    """``(name, f, inputs, tolerance)`` for every differentiable op and a toy model."""
    gen = RngStream(seed).child("gradcheck").generator()
    cases = []

    def probe(shape):
        return gen.uniform(-1, 1, size=shape)

    x, w, b = _rand(gen, 1, 2, 5, 5), _rand(gen, 3, 2, 3, 3), _rand(gen, 3)
    r = probe((1, 3, 5, 5))
    cases.append(("conv2d 3x3 pad1", lambda x, w, b: weighted_sum(T.conv2d(x, w, b, 1, 1), r), [x, w, b], OP_TOLERANCE))
    x2, w2, b2 = _rand(gen, 1, 2, 6, 6), _rand(gen, 3, 2, 2, 2), _rand(gen, 3)
    r2 = probe((1, 3, 3, 3))
    cases.append(("conv2d 2x2 stride2", lambda x, w, b: weighted_sum(T.conv2d(x, w, b, 2, 0), r2), [x2, w2, b2], OP_TOLERANCE))
    x3, w3, b3 = _rand(gen, 1, 2, 7, 7), _rand(gen, 2, 2, 3, 3), _rand(gen, 2)
    r3 = probe((1, 2, 4, 4))
    cases.append(("conv2d 3x3 stride2 pad1", lambda x, w, b: weighted_sum(T.conv2d(x, w, b, 2, 1), r3), [x3, w3, b3], OP_TOLERANCE))

    u = _rand(gen, 1, 2, 3, 3)
    ru = probe((1, 2, 6, 6))
    cases.append(("upsample_nearest2x", lambda u: weighted_sum(T.upsample_nearest2x(u), ru), [u], OP_TOLERANCE))

    def away_from_zero(shape, margin=1e-3):
        v = gen.uniform(-2, 2, size=shape)
        v[np.abs(v) < margin] = margin
        return Tensor(v, requires_grad=True)

    rr = probe((2, 3, 4, 4))
    cases.append(("relu", lambda a: weighted_sum(T.relu(a), rr), [away_from_zero((2, 3, 4, 4))], OP_TOLERANCE))
    cases.append(("sigmoid", lambda a: weighted_sum(T.sigmoid(a), rr), [_rand(gen, 2, 3, 4, 4)], OP_TOLERANCE))
    cases.append(("add", lambda a, c: weighted_sum(T.add(a, c), rr), [_rand(gen, 2, 3, 4, 4), _rand(gen, 2, 3, 4, 4)], OP_TOLERANCE))

    a = gen.uniform(-2, 2, size=(2, 3, 4, 4))
    d = gen.uniform(-2, 2, size=a.shape)
    d[np.abs(d) < 1e-3] = 1e-3
    cases.append(("sub_abs", lambda a, c: weighted_sum(T.sub_abs(a, c), rr),
                  [Tensor(a, requires_grad=True), Tensor(a + d, requires_grad=True)], OP_TOLERANCE))
    rc = probe((1, 5, 4, 4))
    cases.append(("concat_channels", lambda a, c: weighted_sum(T.concat_channels(a, c), rc),
                  [_rand(gen, 1, 2, 4, 4), _rand(gen, 1, 3, 4, 4)], OP_TOLERANCE))
    cases.append(("scale", lambda a: weighted_sum(T.scale(a, 0.8), rr), [_rand(gen, 2, 3, 4, 4)], OP_TOLERANCE))
    drop_rng = RngStream(seed).child("gradcheck-dropout")
    cases.append(("dropout", lambda a: weighted_sum(T.dropout(a, 0.3, drop_rng, ForwardMode.TRAIN), rr),
                  [_rand(gen, 2, 3, 4, 4)], OP_TOLERANCE))
    target = (gen.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    cases.append(("bce_loss", lambda p: T.bce_loss(p, target), [_rand(gen, 2, 1, 4, 4, lo=0.05, hi=0.95)], OP_TOLERANCE))
    cases.append(("tsum", lambda a: T.tsum(T.sigmoid(T.scale(a, 1.5))), [_rand(gen, 2, 3)], OP_TOLERANCE))

    bx = _rand(gen, 1, 2, 5, 5)
    bp = {"conv1.weight": _rand(gen, 2, 2, 3, 3, lo=-0.5, hi=0.5), "conv1.bias": _rand(gen, 2, lo=-0.5, hi=0.5),
          "conv2.weight": _rand(gen, 2, 2, 3, 3, lo=-0.5, hi=0.5), "conv2.bias": _rand(gen, 2, lo=-0.5, hi=0.5)}
    rb = probe((1, 2, 5, 5))
    names = list(bp)

    def block_f(xx, *ps):
        return weighted_sum(residual_block(xx, dict(zip(names, ps)), 0.7, ForwardMode.EVAL), rb)

    cases.append(("residual_block", block_f, [bx] + list(bp.values()), OP_TOLERANCE))

    model = build_model(toy_config(), RngStream(seed).child("toy"), dtype=np.float64)
    t1 = Tensor(gen.random((1, 3, 8, 8)))
    t2 = Tensor(gen.random((1, 3, 8, 8)))
    y = (gen.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    pnames = list(model.params)
    step_rng = RngStream(seed).child("toy-forward")

    def model_f(*ps):
        model.params = dict(zip(pnames, ps))
        return T.bce_loss(forward(model, t1, t2, ForwardMode.TRAIN, step_rng), y)

    cases.append((f"toy model end-to-end ({model.n_params()} params)", model_f, list(model.params.values()), MODEL_TOLERANCE))
    return cases


def run_suite(seed: int = 0, eps: float = 1e-5) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = [CheckResult(name, grad_check(f, inputs, eps), tol) for name, f, inputs, tol in suite_cases(seed)]
    return results, time.perf_counter() - start


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  {'max rel err':>12}  {'tolerance':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:12.3e}  {r.tolerance:9.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
