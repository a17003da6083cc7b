"""End-to-end workflows shared by the CLI, the estimator and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import transfer_weights
from .data import BitemporalSample, render_maps, tile, tile_grid
from .metrics import MetricsReport, binarize, compare_variants, scene_metrics
from .model import Fusion, Model, ModelConfig, build_model
from .optim import OptimizerConfig
from .rng import RngStream
from .training import Episode, TrainConfig, batch_arrays, finetune_episode, predict_maps, train
from .uncertainty import McConfig, UncertaintyMaps, decompose, mc_sample


def model_config_from(values: dict, fusion=None) -> ModelConfig:
    return ModelConfig(
        encoder_channels=list(values["encoder_channels"]),
        blocks_per_stage=values["blocks_per_stage"],
        fusion=fusion or values["fusion"],
        unit_dropout_rate=values["dropout"],
        depth_survival_p=values["survival_p"],
        tile_size=values["tile_size"],
    )


def build_episodes(pool: list[BitemporalSample], queries: list[BitemporalSample], shots: int, seed: int,
                   adapt_epochs: int, adapt_lr: float) -> list[Episode]:
    """One episode per query scene; supports are drawn from ``pool`` without replacement."""
    if shots > len(pool):
        raise ValueError(f"{shots} shots requested but the support pool has {len(pool)} samples")
    episodes = []
    for i, q in enumerate(queries):
        order = RngStream(seed).child("episode", i).generator().permutation(len(pool))
        support = [pool[j] for j in sorted(order[:shots].tolist())]
        episodes.append(Episode(support, [q], adapt_epochs=adapt_epochs, adapt_lr=adapt_lr, id=f"episode_{i:03d}"))
    return episodes


def initial_change_model(config: ModelConfig, seed: int, pretrained: Model | None = None):
    """Fresh change model, optionally with a pretrained encoder; returns ``(model, transferred)``."""
    rng = RngStream(seed).child("init-change")
    if pretrained is None:
        return build_model(config, rng), []
    return transfer_weights(pretrained, config, rng)


@dataclass
class EpisodeResult:
    id: str
    query_ids: list[str]
    probs: list[np.ndarray]
    ious: list[float]
    losses: list[float] = field(default_factory=list)
    model: Model | None = None


def run_episodes(model: Model, episodes: list[Episode], ocfg: OptimizerConfig, *, batch_size: int, seed: int,
                 keep_models: bool = False) -> list[EpisodeResult]:
    out = []
    for ep in episodes:
        losses = []
        adapted, probs = finetune_episode(model, ep, ocfg, batch_size=batch_size, seed=seed, history=losses)
        ious = [scene_metrics(q.id, binarize(p), q.mask).iou for q, p in zip(ep.query, probs)]
        out.append(EpisodeResult(ep.id, [q.id for q in ep.query], probs, ious, losses,
                                 adapted if keep_models else None))
    return out


def mean_query_iou(results: list[EpisodeResult]) -> float:
    values = [v for r in results for v in r.ious]
    return float(np.mean(values)) if values else float("nan")


def predict_scene(model: Model, sample: BitemporalSample, tile_size: int, mc: McConfig | None):
    """Probability and uncertainty rasters over the area covered by full tiles."""
    h, w = sample.shape
    tiles = tile(sample, tile_size)
    grid = tile_grid((h, w), tile_size)
    rows = max(r for r, _ in grid) + tile_size
    cols = max(c for _, c in grid) + tile_size
    prob = np.zeros((rows, cols), dtype=np.float64)
    maps = {k: np.zeros((rows, cols), dtype=np.float64) for k in ("mean_prob", "total", "aleatoric", "epistemic")}
    for (r, c), t in zip(grid, tiles):
        prob[r:r + tile_size, c:c + tile_size] = predict_maps(model, [t])[0]
        if mc is not None:
            x1, x2, _ = batch_arrays([t])
            u = decompose([s[0, 0] for s in mc_sample(model, x1, x2, mc)])
            for k in maps:
                maps[k][r:r + tile_size, c:c + tile_size] = getattr(u, k)
    umaps = UncertaintyMaps(**maps) if mc is not None else None
    return prob, umaps, sample.mask[:rows, :cols]


def evaluate_samples(model: Model, samples: list[BitemporalSample], tile_size: int, mc: McConfig | None,
                     threshold: float = 0.5, out_dir=None) -> tuple[MetricsReport, dict]:
    report = MetricsReport()
    artifacts = {}
    for s in samples:
        prob, umaps, truth = predict_scene(model, s, tile_size, mc)
        pred = binarize(prob, threshold)
        report.scenes.append(scene_metrics(s.id, pred, truth, None if umaps is None else umaps.total))
        if out_dir is not None:
            paths = render_maps(prob, pred, umaps, out_dir, prefix=f"{s.id}_")
            artifacts[s.id] = {k: str(Path(p).relative_to(out_dir)) for k, p in paths.items()}
    return report, artifacts


@dataclass
class VariantRun:
    fusion: str
    losses: list[float]
    report: MetricsReport
    model: Model


def run_compare(train_set, test_set, values: dict, seed: int, mc: McConfig | None,
                variants=(Fusion.EARLY, Fusion.CONCAT, Fusion.DIFF), pretrained: Model | None = None,
                out_dir=None):
    """Train each fusion variant on the same split and tabulate test metrics."""
    runs = {}
    tcfg = TrainConfig(epochs=values["epochs"], batch_size=values["batch"], seed=seed)
    ocfg = OptimizerConfig(lr=values["lr"])
    for fusion in variants:
        fusion = Fusion(fusion)
        model, _ = initial_change_model(model_config_from(values, fusion.value), seed, pretrained)
        losses = train(model, train_set, tcfg, ocfg)
        vdir = None
        if out_dir is not None:
            vdir = Path(out_dir) / fusion.value
            vdir.mkdir(parents=True, exist_ok=True)
        report, _ = evaluate_samples(model, test_set, values["tile_size"], mc, out_dir=vdir)
        runs[fusion.value] = VariantRun(fusion.value, losses, report, model)
    table = compare_variants({k: r.report for k, r in runs.items()})
    return table, runs
