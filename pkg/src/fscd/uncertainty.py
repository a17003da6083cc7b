"""Monte Carlo dropout sampling and entropy decomposition (in bits)."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import Model, forward
from .rng import RngStream
from .tensor import ForwardMode


@dataclass(frozen=True)
class McConfig:
    samples: int = 20
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")


@dataclass
class UncertaintyMaps:
    mean_prob: np.ndarray
    total: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    def squeeze(self) -> "UncertaintyMaps":
        return UncertaintyMaps(*(np.squeeze(a) for a in (self.mean_prob, self.total, self.aleatoric, self.epistemic)))

    def index(self, i) -> "UncertaintyMaps":
        return UncertaintyMaps(self.mean_prob[i], self.total[i], self.aleatoric[i], self.epistemic[i])


def binary_entropy(p):
    """``-p log2 p - (1-p) log2 (1-p)`` with ``0 log 0 = 0``; scalar in, scalar out."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(~((arr >= 0) & (arr <= 1))):
        raise ValueError("binary_entropy: probabilities must lie in [0, 1]")
    q = 1 - arr
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(arr > 0, arr * np.log2(arr), 0) - np.where(q > 0, q * np.log2(q), 0)
    h = np.clip(h, 0, 1)
    return float(h) if np.ndim(p) == 0 else h


def _anchored_mean(sorted_vals: np.ndarray) -> np.ndarray:
    # exact when all samples agree; the sorted order makes it permutation-invariant
    base = sorted_vals[0]
    return base + (sorted_vals - base).sum(axis=0) / sorted_vals.shape[0]


def decompose(samples) -> UncertaintyMaps:
    """Per-pixel total / aleatoric / epistemic entropy of ``T`` probability maps.

    total = H(mean p), aleatoric = mean H(p_i), epistemic = total - aleatoric
    (the mutual information), clamped at zero.
    """
    maps = [np.asarray(s, dtype=np.float64) for s in samples]
    if not maps:
        raise ValueError("decompose: need at least one sample")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ValueError(f"decompose: sample {i} has shape {m.shape}, expected {shape}")
    stack = np.sort(np.stack(maps), axis=0)
    if np.any(~((stack >= 0) & (stack <= 1))):
        raise ValueError("decompose: probabilities must lie in [0, 1]")
    mean_prob = np.clip(_anchored_mean(stack), 0, 1)
    total = binary_entropy(mean_prob)
    aleatoric = _anchored_mean(binary_entropy(stack))
    epistemic = np.maximum(total - aleatoric, 0.0)
    # rounding can leave aleatoric a hair above total where samples agree
    total = np.maximum(total, aleatoric)
    return UncertaintyMaps(mean_prob, np.asarray(total), np.asarray(aleatoric), np.asarray(epistemic))


def mc_sample(model: Model, t1, t2, cfg: McConfig) -> list[np.ndarray]:
    """``cfg.samples`` McSample-mode forwards; sample ``i`` uses stream ``(base_seed, i)``."""
    if cfg.samples < 1:
        raise ValueError(f"samples must be >= 1, got {cfg.samples}")

    def one(i):
        return forward(model, t1, t2, ForwardMode.MC_SAMPLE, RngStream(cfg.base_seed, i)).data

    if cfg.workers <= 1:
        return [one(i) for i in range(cfg.samples)]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(one, range(cfg.samples)))


def mc_uncertainty(model: Model, t1, t2, cfg: McConfig) -> UncertaintyMaps:
    return decompose(mc_sample(model, t1, t2, cfg))
