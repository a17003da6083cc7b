"""``fscd`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure
(non-finite loss), 4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import presets
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DEFAULT_RECIPE, BitemporalSample, DataError, levircd_template, load_split, read_manifest,
                   read_png, render_maps, split_report, synth_dataset)
from .experiment import (build_episodes, evaluate_samples, initial_change_model, mean_query_iou,
                         model_config_from, predict_scene, run_compare, run_episodes)
from .gradcheck import format_table, run_suite
from .metrics import MetricsReport, binarize, scene_metrics
from .model import ConfigError, Model, Task
from .optim import OptimizerConfig
from .training import NumericError, TrainConfig, pretrain, train, write_loss_csv
from .uncertainty import McConfig

log = logging.getLogger("fscd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4
LEVIRCD = "levircd"
RECORD_FIELDS = ("tool", "version", "subcommand", "argv", "seed", "preset", "resolved",
                 "losses", "metrics", "artifacts")


class UsageError(Exception):
    pass


class RunRecordError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(presets.PRESETS), default="desk")
    p.add_argument("--workers", type=int, default=None,
                   help="concurrent loaders / MC forwards (default: $FSCD_WORKERS or 1)")
    p.add_argument("--out-dir", type=Path, required=out_required)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--tile-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--survival-p", type=float)
    p.add_argument("--fusion", choices=["EarlyFusion", "SiamConcat", "SiamDiff"])
    p.add_argument("--adapt-epochs", type=int)
    p.add_argument("--adapt-lr", type=float)
    p.add_argument("--encoder-channels", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated stage widths, e.g. 8,16,32")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fscd", description="Few-shot bi-temporal building change detection.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    _common(p)
    p.add_argument("--size", type=int, default=None, help="scene size in pixels (default: tile size)")
    p.add_argument("--train", type=int, default=DEFAULT_RECIPE["train"])
    p.add_argument("--test", type=int, default=DEFAULT_RECIPE["test"])
    p.add_argument("--pretrain", type=int, default=DEFAULT_RECIPE["pretrain"])
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--change-fraction", type=float, default=0.5)

    p = sub.add_parser("pretrain", help="train the building segmenter on the pretrain split")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("train", help="train a change model on the train split")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--init", type=Path, help="pretrained checkpoint whose encoder is transferred")

    p = sub.add_parser("finetune", help="episodic few-shot adaptation and query prediction")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="pretrain or change checkpoint (default: from scratch)")
    p.add_argument("--episodes", type=int, default=None, help="number of episodes (default: one per test scene)")

    p = sub.add_parser("predict", help="change map and uncertainty maps for one pair")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--t1", type=Path, required=True)
    p.add_argument("--t2", type=Path, required=True)

    p = sub.add_parser("evaluate", help="metrics report over a manifest split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True,
                   help=f"manifest path, or '{LEVIRCD}' for the shipped LEVIR-CD template")
    p.add_argument("--data-root", type=Path, help="resolve relative manifest paths here")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--no-rasters", action="store_true")

    p = sub.add_parser("gradcheck", help="verify every backward rule against central differences")
    _common(p, out_required=False)

    p = sub.add_parser("compare", help="train and compare the three fusion variants")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--init", type=Path, help="pretrained checkpoint whose encoder is transferred")

    p = sub.add_parser("replay", help="re-run a job from its run record")
    p.add_argument("record", type=Path)
    p.add_argument("--out-dir", type=Path, help="write to this directory instead of the recorded one")
    return parser


# ---------------------------------------------------------------------------
# run records


def emit_run_record(config: dict, results: dict, path) -> Path:
    record = {"tool": "fscd", "version": 1, **config,
              "losses": results.get("losses", {}), "metrics": results.get("metrics", {}),
              "artifacts": results.get("artifacts", {})}
    missing = [f for f in RECORD_FIELDS if f not in record]
    if missing:
        raise RunRecordError(f"run record missing field {missing[0]!r}")
    path = Path(path)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_run_record(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"run record not found: {path}")
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RunRecordError(f"{path}: not valid JSON ({exc})") from None
    for name in RECORD_FIELDS:
        if name not in record:
            raise RunRecordError(f"{path}: run record missing field {name!r}")
    return record


# ---------------------------------------------------------------------------
# subcommands


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("FSCD_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FSCD_WORKERS must be an integer, got {env!r}") from None
    return 1


def _resolved(args) -> dict:
    return presets.resolve(
        args.preset, epochs=args.epochs, batch=args.batch, lr=args.lr, mc_samples=args.mc_samples,
        shots=args.shots, tile_size=args.tile_size, dropout=args.dropout, survival_p=args.survival_p,
        fusion=args.fusion, adapt_epochs=args.adapt_epochs, adapt_lr=args.adapt_lr,
        encoder_channels=args.encoder_channels,
    )


def _mc(values, seed, workers) -> McConfig | None:
    return McConfig(values["mc_samples"], base_seed=seed, workers=workers) if values["mc_samples"] > 0 else None


def _load_model(path: Path) -> Model:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _change_model_from(path: Path | None, values: dict, seed: int) -> tuple[Model, list[str]]:
    config = model_config_from(values)
    if path is None:
        return initial_change_model(config, seed)
    source = _load_model(path)
    if source.config.task is Task.CHANGE:
        return source, list(source.params)
    return initial_change_model(config, seed, source)


def cmd_synth(args, values, workers):
    size = args.size or values["tile_size"]
    recipe = {"train": args.train, "test": args.test, "pretrain": args.pretrain}
    manifest = synth_dataset(args.out_dir, seed=args.seed, size=size, recipe=recipe, workers=workers,
                             noise_sigma=args.noise, change_fraction=args.change_fraction)
    counts = split_report(read_manifest(manifest))
    print(json.dumps(counts, sort_keys=True))
    return {"metrics": {"split_counts": counts}, "artifacts": {"manifest": manifest.name}}


def cmd_pretrain(args, values, workers):
    manifest = read_manifest(args.manifest)
    corpus = load_split(manifest, "pretrain", workers)
    tcfg = TrainConfig(epochs=values["epochs"], batch_size=values["batch"], seed=args.seed)
    model, history = pretrain(model_config_from(values), corpus, tcfg, OptimizerConfig(lr=values["lr"]))
    ckpt = save_checkpoint(model, args.out_dir / "pretrain.fscd")
    write_loss_csv(history, args.out_dir / "pretrain_loss.csv")
    print(f"pretrain: {len(corpus)} scenes, loss {history[0]:.6f} -> {history[-1]:.6f}")
    return {"losses": {"pretrain": history},
            "artifacts": {"checkpoint": ckpt.name, "loss_csv": "pretrain_loss.csv"}}


def cmd_train(args, values, workers):
    manifest = read_manifest(args.manifest)
    data = load_split(manifest, "train", workers)
    model, moved = _change_model_from(args.init, values, args.seed)
    tcfg = TrainConfig(epochs=values["epochs"], batch_size=values["batch"], seed=args.seed)
    history = train(model, data, tcfg, OptimizerConfig(lr=values["lr"]))
    ckpt = save_checkpoint(model, args.out_dir / "model.fscd")
    write_loss_csv(history, args.out_dir / "train_loss.csv")
    print(f"train: {len(data)} pairs, loss {history[0]:.6f} -> {history[-1]:.6f}")
    return {"losses": {"train": history}, "metrics": {"transferred": moved},
            "artifacts": {"checkpoint": ckpt.name, "loss_csv": "train_loss.csv"}}


def cmd_finetune(args, values, workers):
    manifest = read_manifest(args.manifest)
    pool = load_split(manifest, "train", workers)
    queries = load_split(manifest, "test", workers)
    if args.episodes is not None:
        queries = queries[:args.episodes]
    if not queries:
        raise DataError("finetune: the manifest has no test scenes to use as queries")
    model, moved = _change_model_from(args.checkpoint, values, args.seed)
    episodes = build_episodes(pool, queries, values["shots"], args.seed, values["adapt_epochs"], values["adapt_lr"])
    results = run_episodes(model, episodes, OptimizerConfig(lr=values["lr"]), batch_size=values["adapt_batch"],
                           seed=args.seed, keep_models=True)
    ep_dir = args.out_dir / "episodes"
    ep_dir.mkdir(exist_ok=True)
    report = MetricsReport()
    artifacts = {"transferred": moved, "episodes": {}}
    for ep, res in zip(episodes, results):
        ckpt = save_checkpoint(res.model, ep_dir / f"{res.id}.fscd")
        write_loss_csv(res.losses, ep_dir / f"{res.id}_loss.csv") if res.losses else None
        for q, prob in zip(ep.query, res.probs):
            pred = binarize(prob)
            report.scenes.append(scene_metrics(q.id, pred, q.mask))
            render_maps(prob, pred, None, ep_dir, prefix=f"{res.id}_{q.id}_")
        artifacts["episodes"][res.id] = {"checkpoint": str(ckpt.relative_to(args.out_dir)),
                                         "support": [s.id for s in ep.support], "query": res.query_ids}
    report.write(args.out_dir, "finetune_report")
    miou = mean_query_iou(results)
    print(f"finetune: {len(episodes)} episodes, K={values['shots']}, mean query IoU {miou:.4f}")
    return {"losses": {r.id: r.losses for r in results}, "metrics": {"mean_query_iou": miou, **report.aggregate},
            "artifacts": artifacts}


def _read_pair(t1: Path, t2: Path) -> BitemporalSample:
    images = []
    for p in (t1, t2):
        if not p.exists():
            raise FileNotFoundError(f"input image not found: {p}")
        img = read_png(p)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"{p}: expected an RGB image, got shape {img.shape}")
        images.append(np.asarray(img, np.float32) / 255)
    if images[0].shape != images[1].shape:
        raise DataError(f"t1 {images[0].shape} and t2 {images[1].shape} differ in size")
    # no ground truth: a blank mask keeps the sample well-formed
    return BitemporalSample(images[0], images[1], np.zeros(images[0].shape[:2], np.uint8), "pair")


def cmd_predict(args, values, workers):
    model = _load_model(args.checkpoint)
    sample = _read_pair(args.t1, args.t2)
    tile_size = min(values["tile_size"], *sample.shape)
    prob, umaps, _ = predict_scene(model, sample, tile_size, _mc(values, args.seed, workers))
    paths = render_maps(prob, binarize(prob), umaps, args.out_dir)
    metrics = {"changed_fraction": float(binarize(prob).mean())}
    if umaps is not None:
        metrics["mean_entropy"] = float(umaps.total.mean())
    print(json.dumps(metrics, sort_keys=True))
    return {"metrics": metrics, "artifacts": {k: p.name for k, p in paths.items()}}


def cmd_evaluate(args, values, workers):
    model = _load_model(args.checkpoint)
    if str(args.manifest) == LEVIRCD and not args.manifest.exists():
        manifest = levircd_template(args.data_root or ".")
    else:
        manifest = read_manifest(args.manifest, root=args.data_root)
    samples = load_split(manifest, args.split, workers)
    if not samples:
        raise DataError(f"evaluate: the {args.split} split is empty")
    raster_dir = None
    if not args.no_rasters:
        raster_dir = args.out_dir / "rasters"
        raster_dir.mkdir(exist_ok=True)
    report, rasters = evaluate_samples(model, samples, values["tile_size"], _mc(values, args.seed, workers),
                                       out_dir=raster_dir)
    paths = report.write(args.out_dir, "report")
    agg = report.aggregate
    print(f"evaluate: {len(samples)} scenes, mean IoU {agg['iou']:.4f}, mean entropy {agg['mean_entropy']:.4f}")
    return {"metrics": agg, "artifacts": {"report_json": paths["json"].name, "report_csv": paths["csv"].name,
                                          "rasters": {k: {n: f"rasters/{p}" for n, p in v.items()}
                                                      for k, v in rasters.items()}}}


def cmd_gradcheck(args, values, workers):
    results, seconds = run_suite(args.seed)
    print(format_table(results))
    print(f"elapsed {seconds:.1f} s")
    failed = [r.name for r in results if not r.passed]
    return {"metrics": {r.name: r.error for r in results}, "failed": failed}


def cmd_compare(args, values, workers):
    manifest = read_manifest(args.manifest)
    train_set = load_split(manifest, "train", workers)
    test_set = load_split(manifest, "test", workers)
    pretrained = _load_model(args.init) if args.init else None
    table, runs = run_compare(train_set, test_set, values, args.seed, _mc(values, args.seed, workers),
                              pretrained=pretrained, out_dir=args.out_dir)
    paths = table.write(args.out_dir)
    for name, run in runs.items():
        write_loss_csv(run.losses, args.out_dir / name / "train_loss.csv")
        run.report.write(args.out_dir / name, "report")
    print(table.to_csv(), end="")
    return {"losses": {k: r.losses for k, r in runs.items()}, "metrics": {"rows": table.rows},
            "artifacts": {"comparison_json": paths["json"].name, "comparison_csv": paths["csv"].name}}


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "finetune": cmd_finetune,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "compare": cmd_compare}


def portable_argv(argv: list[str]) -> list[str]:
    """``argv`` without --out-dir and --workers, neither of which affects outputs."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ("--out-dir", "--workers"):
            skip = True
            continue
        if tok.startswith(("--out-dir=", "--workers=")):
            continue
        out.append(tok)
    return out


def _execute(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "replay":
        record = load_run_record(args.record)
        out_dir = args.out_dir or args.record.parent
        return _execute(list(record["argv"]) + ["--out-dir", str(out_dir)])
    values = _resolved(args)
    workers = _workers(args)
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
    results = COMMANDS[args.command](args, values, workers)
    if args.out_dir is not None:
        emit_run_record({"subcommand": args.command, "argv": portable_argv(argv), "seed": args.seed,
                         "preset": args.preset, "resolved": values},
                        results, args.out_dir / "run_record.json")
    if results.get("failed"):
        print(f"gradcheck: {len(results['failed'])} check(s) above tolerance", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _execute(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, DataError, RunRecordError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
