"""Pixelwise change-class metrics and variant comparison tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(prob) > threshold).astype(np.uint8)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"confusion: prediction shape {pred.shape} != truth shape {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num: int, den: int, c: ConfusionCounts) -> float:
    if c.tp == c.fp == c.fn == 0:
        # nothing predicted, nothing changed: a correct no-change scene
        return 1.0
    return num / den if den else 0.0


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


def f1(c: ConfusionCounts) -> float:
    if c.tp == c.fp == c.fn == 0:
        return 1.0
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r else 0.0


def mean_entropy(entropy_map) -> float:
    arr = np.asarray(entropy_map, dtype=np.float64)
    return float(arr.mean()) if arr.size else 0.0


def stable_mean(values) -> float:
    """Mean anchored on the first value: exact for identical inputs."""
    values = [float(v) for v in values]
    if not values:
        return float("nan")
    base = values[0]
    return base + math.fsum(v - base for v in values) / len(values)


METRIC_FIELDS = ("iou", "precision", "recall", "f1", "mean_entropy")


@dataclass
class SceneMetrics:
    id: str
    iou: float
    precision: float
    recall: float
    f1: float
    mean_entropy: float
    counts: ConfusionCounts | None = None


def scene_metrics(scene_id: str, pred, truth, entropy_map=None) -> SceneMetrics:
    c = confusion(pred, truth)
    ent = mean_entropy(entropy_map) if entropy_map is not None else 0.0
    return SceneMetrics(scene_id, iou(c), precision(c), recall(c), f1(c), ent, c)


@dataclass
class MetricsReport:
    scenes: list[SceneMetrics] = field(default_factory=list)
    level: str = "pixel"

    def ordered(self) -> list[SceneMetrics]:
        return sorted(self.scenes, key=lambda s: s.id)

    @property
    def aggregate(self) -> dict[str, float]:
        ordered = self.ordered()
        return {k: stable_mean(getattr(s, k) for s in ordered) for k in METRIC_FIELDS}

    def to_dict(self) -> dict:
        scenes = []
        for s in self.ordered():
            d = {k: getattr(s, k) for k in ("id",) + METRIC_FIELDS}
            if s.counts is not None:
                d["counts"] = asdict(s.counts)
            scenes.append(d)
        return {"level": self.level, "n_scenes": len(scenes), "scenes": scenes, "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + METRIC_FIELDS)
        for s in self.ordered():
            w.writerow([s.id] + [f"{getattr(s, k):.6f}" for k in METRIC_FIELDS])
        agg = self.aggregate
        w.writerow(["mean"] + [f"{agg[k]:.6f}" for k in METRIC_FIELDS])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv"}
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        paths["csv"].write_text(self.to_csv(), encoding="utf-8")
        return paths


COMPARISON_FIELDS = ("variant", "precision", "iou", "mean_entropy")


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_json(self) -> str:
        return json.dumps({"level": "pixel", "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_FIELDS)
        for r in self.rows:
            w.writerow([r["variant"]] + [f"{r[k]:.6f}" for k in COMPARISON_FIELDS[1:]])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "comparison") -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv"}
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        paths["csv"].write_text(self.to_csv(), encoding="utf-8")
        return paths


def compare_variants(reports: dict[str, MetricsReport]) -> ComparisonTable:
    """One row per variant from per-variant reports over the same scenes."""
    if not reports:
        raise ValueError("compare_variants: no variants given")
    scene_sets = {name: sorted(s.id for s in r.scenes) for name, r in reports.items()}
    reference = next(iter(scene_sets.values()))
    for name, ids in scene_sets.items():
        if ids != reference:
            raise ValueError(f"compare_variants: variant {name!r} was evaluated on a different scene set")
    rows = []
    for name, report in reports.items():
        agg = report.aggregate
        rows.append({"variant": name, "precision": agg["precision"], "iou": agg["iou"],
                     "mean_entropy": agg["mean_entropy"]})
    return ComparisonTable(rows)
