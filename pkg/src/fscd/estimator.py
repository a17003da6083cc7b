"""scikit-learn style wrapper around the change model.

``X`` is an array of image pairs shaped ``(n, 2, H, W, 3)`` in [0, 1];
``y`` holds binary change masks shaped ``(n, H, W)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint
from .data import BitemporalSample
from .experiment import initial_change_model, model_config_from
from .metrics import binarize, scene_metrics, stable_mean
from .model import Task
from .optim import OptimizerConfig
from .training import Episode, TrainConfig, batch_arrays, finetune_episode, predict_maps, train
from .uncertainty import McConfig, mc_uncertainty


def check_pairs(X, tile_size: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[4] != 3:
        raise ValueError(f"X must be (n, 2, H, W, 3), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X contains no pairs")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if tile_size is not None and X.shape[2:4] != (tile_size, tile_size):
        raise ValueError(f"pairs must be {tile_size}x{tile_size} tiles, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != X.shape[:1] + X.shape[2:4]:
        raise ValueError(f"y must be (n, H, W) = {X.shape[:1] + X.shape[2:4]}, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must be binary (0/1)")
    return y.astype(np.uint8)


def _samples(X, y=None) -> list[BitemporalSample]:
    masks = np.zeros(X.shape[:1] + X.shape[2:4], np.uint8) if y is None else y
    return [BitemporalSample(X[i, 0], X[i, 1], masks[i], f"x{i:05d}") for i in range(len(X))]


class ChangeDetector(BaseEstimator):
    """Siamese change detector with MC-dropout uncertainty.

    ``init_checkpoint`` may name a pretrained segmenter (its encoder is
    transferred) or a change checkpoint (used as the starting point).
    """

    def __init__(self, fusion="SiamDiff", encoder_channels=(8, 16, 32), blocks_per_stage=2,
                 unit_dropout_rate=0.5, depth_survival_p=0.8, epochs=30, batch_size=8, lr=1e-3,
                 seed=0, mc_samples=20, threshold=0.5, init_checkpoint=None, workers=1):
        self.fusion = fusion
        self.encoder_channels = encoder_channels
        self.blocks_per_stage = blocks_per_stage
        self.unit_dropout_rate = unit_dropout_rate
        self.depth_survival_p = depth_survival_p
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.mc_samples = mc_samples
        self.threshold = threshold
        self.init_checkpoint = init_checkpoint
        self.workers = workers

    def _values(self, tile_size: int) -> dict:
        return {"encoder_channels": list(self.encoder_channels), "blocks_per_stage": self.blocks_per_stage,
                "fusion": self.fusion, "dropout": self.unit_dropout_rate,
                "survival_p": self.depth_survival_p, "tile_size": tile_size}

    def _initial_model(self, tile_size: int):
        config = model_config_from(self._values(tile_size))
        if self.init_checkpoint is None:
            return initial_change_model(config, self.seed)[0]
        source = load_checkpoint(self.init_checkpoint)
        if source.config.task is Task.CHANGE:
            return source
        return initial_change_model(config, self.seed, source)[0]

    def fit(self, X, y):
        X = check_pairs(X)
        y = check_masks(y, X)
        model = self._initial_model(X.shape[2])
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)
        self.loss_history_ = train(model, _samples(X, y), tcfg, OptimizerConfig(lr=self.lr))
        self.model_ = model
        self.tile_size_ = X.shape[2]
        return self

    def adapt(self, X, y, epochs=20, lr=1e-3, batch_size=1):
        """Few-shot fine-tune a copy on support pairs; returns the adapted estimator."""
        check_is_fitted(self, "model_")
        X = check_pairs(X, self.tile_size_)
        y = check_masks(y, X)
        episode = Episode(_samples(X, y), _samples(X[:1]), adapt_epochs=epochs, adapt_lr=lr)
        losses = []
        adapted, _ = finetune_episode(self.model_, episode, OptimizerConfig(lr=self.lr),
                                      batch_size=batch_size, seed=self.seed, history=losses)
        clone = type(self)(**self.get_params())
        clone.model_, clone.tile_size_, clone.loss_history_ = adapted, self.tile_size_, losses
        return clone

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_pairs(X, self.tile_size_)
        return np.stack(predict_maps(self.model_, _samples(X)))

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.threshold).astype(np.uint8)

    def predict_uncertainty(self, X) -> dict[str, np.ndarray]:
        """MC-dropout ``mean_prob``, ``total``, ``aleatoric`` and ``epistemic`` maps, each ``(n, H, W)``."""
        check_is_fitted(self, "model_")
        X = check_pairs(X, self.tile_size_)
        x1, x2, _ = batch_arrays(_samples(X))
        maps = mc_uncertainty(self.model_, x1, x2, McConfig(self.mc_samples, self.seed, self.workers))
        return {k: getattr(maps, k)[:, 0] for k in ("mean_prob", "total", "aleatoric", "epistemic")}

    def score(self, X, y) -> float:
        """Mean per-pair IoU."""
        X = check_pairs(X)
        y = check_masks(y, X)
        pred = self.predict(X)
        return stable_mean(scene_metrics(str(i), p, t).iou for i, (p, t) in enumerate(zip(pred, y)))
