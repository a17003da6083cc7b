"""Supervised training, building-segmentation pretraining and episodic fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import BitemporalSample
from .model import Model, ModelConfig, Task, build_model, forward, to_nchw
from .optim import AdamState, OptimizerConfig, adam_step
from .rng import RngStream
from .tensor import ForwardMode, Tape, bce_loss

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 64
    seed: int = 0
    loss: str = "BCE"
    shuffle: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "BCE":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class Episode:
    support: list[BitemporalSample]
    query: list[BitemporalSample]
    adapt_epochs: int = 20
    adapt_lr: float = 1e-4
    id: str = ""

    def __post_init__(self):
        if not self.query:
            raise ValueError("an episode needs at least one query sample")
        if self.adapt_epochs < 0:
            raise ValueError(f"adapt_epochs must be >= 0, got {self.adapt_epochs}")

    @property
    def shots(self) -> int:
        return len(self.support)


def batch_arrays(samples: list[BitemporalSample]):
    x1 = to_nchw(np.stack([s.t1 for s in samples]))
    x2 = None if samples[0].t2 is None else to_nchw(np.stack([s.t2 for s in samples]))
    y = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return x1, x2, y


def _trainable(model: Model, freeze_encoder: bool) -> list[str]:
    if not freeze_encoder:
        return list(model.params)
    return [n for n in model.params if not n.startswith("encoder.")]


def train(model: Model, dataset: list[BitemporalSample], tcfg: TrainConfig,
          ocfg: OptimizerConfig = OptimizerConfig(), state: AdamState | None = None) -> list[float]:
    """Mini-batch Adam on pixelwise BCE; returns the per-epoch mean loss.

    The final batch of an epoch may be smaller than ``batch_size``.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    check_task(model, dataset)
    state = AdamState() if state is None else state
    names = _trainable(model, tcfg.freeze_encoder)
    root = RngStream(tcfg.seed)
    n = len(dataset)
    history = []
    for epoch in range(tcfg.epochs):
        order = root.child("shuffle", epoch).generator().permutation(n) if tcfg.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            x1, x2, y = batch_arrays([dataset[i] for i in idx])
            model.zero_grad()
            with Tape() as tape:
                prob = forward(model, x1, x2, ForwardMode.TRAIN, root.child("step", epoch, b))
                loss = bce_loss(prob, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            for name in names:
                p = model.params[name]
                if p.grad is None:
                    # depth-dropped blocks receive no gradient this step
                    p.grad = np.zeros_like(p.data)
            adam_step(model.params, state, ocfg, names)
            total += value * len(idx)
        history.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return history


def check_task(model: Model, dataset: list[BitemporalSample]) -> None:
    single = model.config.task is Task.SEGMENT
    for s in dataset:
        if single != (s.t2 is None):
            kind = "single-image" if single else "bi-temporal"
            raise ValueError(f"{model.config.task.value} model needs {kind} samples; {s.id!r} does not match")


def _as_pretrain_samples(corpus) -> list[BitemporalSample]:
    out = []
    for i, item in enumerate(corpus):
        if isinstance(item, BitemporalSample):
            out.append(item if item.t2 is None else BitemporalSample(item.t1, None, item.mask, item.id))
        else:
            image, mask = item
            out.append(BitemporalSample(np.asarray(image, np.float32), None, np.asarray(mask, np.uint8), f"pre{i}"))
    return out


def pretrain(config: ModelConfig, corpus, tcfg: TrainConfig, ocfg: OptimizerConfig = OptimizerConfig(),
             path=None) -> Path | tuple[Model, list[float]]:
    """Train a single-image building segmenter.

    With ``path`` the checkpoint is written and its path returned; without
    it the ``(model, loss_history)`` pair is returned.
    """
    samples = _as_pretrain_samples(corpus)
    if not samples:
        raise ValueError("pretrain: corpus is empty")
    seg_config = config.replace(task=Task.SEGMENT.value)
    model = build_model(seg_config, RngStream(tcfg.seed).child("init"))
    history = train(model, samples, tcfg, ocfg)
    if path is None:
        return model, history
    save_checkpoint(model, path)
    return Path(path)


def finetune_episode(model: Model, episode: Episode, ocfg: OptimizerConfig = OptimizerConfig(), *,
                     batch_size: int = 8, seed: int = 0, freeze_encoder: bool = False,
                     history: list | None = None):
    """Adapt a clone of ``model`` on the support pairs, predict every query pair.

    Returns ``(adapted_model, query_probability_maps)``; the input model is
    never modified.
    """
    adapted = model.clone()
    if episode.shots and episode.adapt_epochs:
        tcfg = TrainConfig(epochs=episode.adapt_epochs, batch_size=batch_size, seed=seed,
                           freeze_encoder=freeze_encoder)
        losses = train(adapted, episode.support, tcfg, replace(ocfg, lr=episode.adapt_lr))
        if history is not None:
            history.extend(losses)
    return adapted, predict_maps(adapted, episode.query)


def predict_maps(model: Model, samples: list[BitemporalSample], batch_size: int = 8) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x1, x2, _ = batch_arrays(chunk)
        prob = forward(model, x1, x2, ForwardMode.EVAL)
        out.extend(prob.data[:, 0])
    return out


def support_loss(model: Model, samples: list[BitemporalSample]) -> float:
    """Eval-mode mean BCE over ``samples``."""
    x1, x2, y = batch_arrays(samples)
    return float(bce_loss(forward(model, x1, x2, ForwardMode.EVAL), y).data)


def write_loss_csv(history: list[float], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.9g}\n")
    return path


def read_loss_csv(path) -> list[float]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "epoch,loss":
        raise ValueError(f"{path}: not a loss history CSV")
    return [float(line.split(",")[1]) for line in lines[1:] if line]
