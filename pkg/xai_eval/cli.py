"""
Command-line interface: one subcommand per experiment step

    xai-eval synth    --out data --seed 0
    xai-eval train    --manifest data/manifest.json --out runs/a
    xai-eval eval     --manifest ... --checkpoint runs/a/model.ckpt
    xai-eval explain  ... --methods gradient,integrated_gradients
    xai-eval localise ...
    xai-eval mcd      ... --samples 500
    xai-eval flip     ... --classes disk --samples 100

Exit codes: 0 success, 1 computational error, 2 usage or IO error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from xai_eval.attribution import IGConfig, SaliencyMap, explain
from xai_eval.config import RunConfig, resolve_config, setup_logging
from xai_eval.data import (
    RunManifest, generate_synthetic, load_image, load_images, load_manifest, load_masks,
)
from xai_eval.errors import EXIT_OK, DataError, exit_code_for
from xai_eval.faithfulness import FlipBundle, fill_values, pf_mcd_experiment, pf_random_baseline, pf_saliency_experiment
from xai_eval.localisation import LocalisationConfig, evaluate_localisation, localisation_table, random_map_baseline
from xai_eval.model import (
    Checkpoint, ModelSpec, TrainParams, evaluate, load_checkpoint, predicted_label, save_checkpoint,
    split_stratified, train,
)
from xai_eval.rasters import write_heatmap_png, write_raster
from xai_eval.report import svg_histogram, svg_line_plot, write_csv, write_json, atomic_write_text
from xai_eval.uncertainty import MCDConfig, mcd_predict, mcd_saliency_stack, quantile_maps

logger = logging.getLogger(__name__)

DEFAULT_MCD_SAMPLES = 500
DEFAULT_FLIP_SAMPLES = 100


def select_records(manifest: RunManifest, cfg: RunConfig) -> RunManifest:
    """Split (or "all"), optional class filter, optional limit"""
    selected = manifest if cfg.split == "all" else manifest.subset(cfg.split)
    if cfg.classes:
        wanted = {manifest.class_index(name) for name in cfg.classes}
        selected = selected.with_records([r for r in selected.records if r.class_index in wanted])
    if len(selected) == 0:
        raise DataError(f"No records in split '{cfg.split}' of {cfg.manifest}")
    if cfg.limit is not None and cfg.subcommand != "flip":
        selected = selected.with_records(selected.records[:cfg.limit])
    return selected


def _map_name(index: int, manifest: RunManifest) -> str:
    return f"{index:04d}_{manifest.records[index].stem}"


def _with_ext(base: Path, ext: str) -> Path:
    # stems and class names may contain dots
    return base.with_name(base.name + ext)


def compute_maps(ckpt: Checkpoint, manifest: RunManifest, cfg: RunConfig,
                 aggregation: str = "raw-sum") -> Dict[str, List[SaliencyMap]]:
    """Deterministic maps w.r.t. the predicted label, per method, in manifest order"""
    ig = IGConfig(steps=cfg.ig_steps)
    maps: Dict[str, List[SaliencyMap]] = {m: [] for m in cfg.methods}
    for i, rec in enumerate(manifest.records):
        image = load_image(rec.image, manifest.image_size, manifest.normalization)
        target = predicted_label(ckpt, image)
        for method in cfg.methods:
            smap = explain(method, ckpt, image, target, aggregation, ig)
            smap.metadata.update({
                "image": str(rec.image),
                "target": "predicted",
                "true_label": rec.class_index,
                "seed_lineage": {"seed": cfg.seed},
            })
            maps[method].append(smap)
        logger.debug(f"Explained {rec.image} (target {target})")
    return maps


def cmd_synth(cfg: RunConfig) -> Dict[str, Any]:
    spec = cfg.synthetic.model_copy(update={"seed": cfg.seed})
    dataset = generate_synthetic(spec, cfg.out)
    summary = {
        "manifest": str(dataset.manifest_path),
        "images": len(dataset.manifest),
        "classes": list(dataset.manifest.class_names),
        "splits": dataset.manifest.splits(),
    }
    write_json(cfg.out / "synth_report.json", summary, cfg.artifact_config())
    return summary


def cmd_train(cfg: RunConfig) -> Dict[str, Any]:
    manifest = load_manifest(cfg.manifest)
    train_set = manifest.subset(cfg.train_split)
    if len(train_set) == 0 and not manifest.splits():
        train_set = manifest
    if len(train_set) == 0:
        raise DataError(f"No records in split '{cfg.train_split}' of {cfg.manifest}")
    val_set = manifest.subset(cfg.val_split) if cfg.val_split else train_set.with_records([])
    if len(val_set) == 0:
        train_set, val_set = split_stratified(train_set, cfg.split_ratio, cfg.seed)

    spec = ModelSpec(
        input_shape=(3,) + tuple(manifest.image_size),
        num_classes=manifest.num_classes,
        dropout_rate=0.5 if cfg.dropout_rate is None else cfg.dropout_rate,
    )
    params = TrainParams(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    ckpt = train(spec, train_set, val_set, params, workers=cfg.workers, show_progress=cfg.show_progress)
    ckpt.metadata["run_config"] = cfg.artifact_config()

    ckpt_path = save_checkpoint(ckpt, cfg.checkpoint or cfg.out / "model.ckpt")
    history = ckpt.metadata["history"]
    log_path = write_csv(
        cfg.out / "train_log.csv",
        ["epoch", "train_loss", "val_loss", "val_accuracy"],
        [[h["epoch"], h["train_loss"], h["val_loss"], h["val_accuracy"]] for h in history],
        cfg.artifact_config(),
    )
    return {
        "checkpoint": str(ckpt_path),
        "log": str(log_path),
        "epochs": len(history),
        "final_train_loss": ckpt.metadata["final_train_loss"],
        "final_val_loss": ckpt.metadata["final_val_loss"],
        "val_accuracy": history[-1]["val_accuracy"] if history else None,
    }


def cmd_eval(cfg: RunConfig) -> Dict[str, Any]:
    manifest = select_records(load_manifest(cfg.manifest), cfg)
    ckpt = load_checkpoint(cfg.checkpoint)
    ks = sorted(set(cfg.topk) | {1, 3})
    report = evaluate(ckpt, manifest, ks, workers=cfg.workers)
    summary = report.to_dict()
    write_json(cfg.out / "eval.json", summary, cfg.artifact_config())
    write_csv(
        cfg.out / "confusion.csv",
        ["true/predicted"] + report.class_names,
        [[name] + row for name, row in zip(report.class_names, report.confusion.tolist())],
        cfg.artifact_config(),
    )
    return summary


def cmd_explain(cfg: RunConfig) -> Dict[str, Any]:
    manifest = select_records(load_manifest(cfg.manifest), cfg)
    ckpt = load_checkpoint(cfg.checkpoint)
    maps = compute_maps(ckpt, manifest, cfg, cfg.aggregation or "raw-sum")
    run_config = cfg.artifact_config()
    index: List[Dict[str, Any]] = []
    for method, method_maps in maps.items():
        for i, smap in enumerate(method_maps):
            base = cfg.out / "maps" / method / _map_name(i, manifest)
            raster = smap.save(_with_ext(base, ".f32"), run_config)
            heatmap = smap.save_heatmap(_with_ext(base, ".png"), run_config)
            index.append({"method": method, "image": smap.metadata["image"], "label": smap.label,
                          "raster": str(raster), "heatmap": str(heatmap)})
    write_json(cfg.out / "explain_index.json", {"maps": index}, run_config)
    return {"maps": len(index), "methods": list(maps), "images": len(manifest)}


def cmd_localise(cfg: RunConfig) -> Dict[str, Any]:
    manifest = select_records(load_manifest(cfg.manifest), cfg)
    ckpt = load_checkpoint(cfg.checkpoint)
    mode = {None: "positive", "raw-sum": "as-is"}.get(cfg.aggregation, cfg.aggregation)
    lcfg = LocalisationConfig(k=cfg.k, part=cfg.part, aggregation=mode, metrics=cfg.metrics, workers=cfg.workers)
    maps = compute_maps(ckpt, manifest, cfg)
    masks = load_masks(manifest)
    results = {method: evaluate_localisation(method_maps, masks, lcfg) for method, method_maps in maps.items()}

    run_config = cfg.artifact_config()
    header, rows = localisation_table(results)
    write_csv(cfg.out / "localisation.csv", header, rows, run_config)
    detail: Dict[str, Any] = {
        "methods": {m: {metric: r.to_dict() for metric, r in res.items()} for m, res in results.items()},
        "skipped": {m: {metric: r.skipped for metric, r in res.items()} for m, res in results.items()},
    }
    if cfg.random_maps > 0:
        baseline = random_map_baseline(masks, cfg.random_maps, cfg.seed, lcfg)
        detail["random_baseline"] = {metric: r.mean for metric, r in baseline.items()}
    write_json(cfg.out / "localisation.json", detail, run_config)
    return {
        "table": {m: {metric: r.mean for metric, r in res.items()} for m, res in results.items()},
        "skipped": detail["skipped"],
        "random_baseline": detail.get("random_baseline"),
    }


def _mcd_config(cfg: RunConfig, default_samples: int) -> MCDConfig:
    return MCDConfig(
        samples=cfg.mcd_samples or default_samples,
        dropout_rate=cfg.dropout_rate,
        seed=cfg.seed if cfg.mcd_seed is None else cfg.mcd_seed,
        workers=cfg.workers,
        show_progress=cfg.show_progress,
    )


def cmd_mcd(cfg: RunConfig) -> Dict[str, Any]:
    """
    Predictive distribution, histogram and quantile maps per image

    Without --limit only the first selected image is processed.
    """
    manifest = select_records(load_manifest(cfg.manifest), cfg)
    if cfg.limit is None:
        manifest = manifest.with_records(manifest.records[:1])
    ckpt = load_checkpoint(cfg.checkpoint)
    mcd = _mcd_config(cfg, DEFAULT_MCD_SAMPLES)
    aggregation = cfg.aggregation or "raw-sum"
    ig = IGConfig(steps=cfg.ig_steps)
    run_config = cfg.artifact_config()
    names = list(manifest.class_names)
    summaries: List[Dict[str, Any]] = []

    for i, rec in enumerate(manifest.records):
        image = load_image(rec.image, manifest.image_size, manifest.normalization)
        stem = cfg.out / "mcd" / _map_name(i, manifest)
        target = predicted_label(ckpt, image)
        dist = mcd_predict(ckpt, image, mcd)
        write_csv(
            stem.with_name(stem.name + "_distribution.csv"),
            ["sample", "seed"] + names,
            [[t, mcd.seed + t] + row for t, row in enumerate(dist.probs.tolist())],
            run_config,
        )
        counts, edges = dist.histogram(rec.class_index)
        atomic_write_text(
            stem.with_name(stem.name + "_histogram.svg"),
            svg_histogram(counts.tolist(), edges.tolist(), f"{rec.class_name}: true-class probability, T={mcd.samples}",
                          "softmax probability", run_config),
        )
        quantile_files: Dict[str, List[str]] = {}
        for method in cfg.methods:
            stack = mcd_saliency_stack(ckpt, image, target, method, mcd, aggregation, ig)
            stack.save(cfg.out / "mcd" / method / f"{stem.name}_stack.f32", run_config)
            quantile_files[method] = []
            for qmap in quantile_maps(stack, cfg.quantiles, cfg.quantile_method):
                qbase = cfg.out / "mcd" / method / f"{stem.name}_q{qmap.q:g}"
                raster = _with_ext(qbase, ".f32")
                smap = qmap.to_saliency_map()
                write_raster(raster, smap.values, smap.describe(), run_config)
                write_heatmap_png(_with_ext(qbase, ".png"), smap.values, run_config)
                quantile_files[method].append(str(raster))
        summary = {
            "image": str(rec.image),
            "true_label": rec.class_index,
            "predicted_label": target,
            "true_class": dist.summary(rec.class_index, cfg.quantiles),
            "predicted_class": dist.summary(target, cfg.quantiles),
            "mean": dist.mean(),
            "std": dist.std(),
            "quantile_maps": quantile_files,
        }
        write_json(stem.with_name(stem.name + "_summary.json"), summary, run_config)
        summaries.append(summary)
    return {"images": len(summaries), "samples": mcd.samples, "seed": mcd.seed, "summaries": summaries}


def _write_bundle(cfg: RunConfig, class_name: str, bundle: FlipBundle) -> Dict[str, Any]:
    run_config = cfg.artifact_config()
    base = cfg.out / "flip" / class_name
    header, rows = bundle.csv_table()
    write_csv(_with_ext(base, ".csv"), header, rows, run_config)
    series = {name: (c.fractions.tolist(), c.scores.tolist()) for name, c in bundle.curves.items()}
    series["random"] = (bundle.random.fractions.tolist(), bundle.random.scores.tolist())
    atomic_write_text(
        _with_ext(base, ".svg"),
        svg_line_plot(series, f"Pixel flipping: {class_name}", "flipped pixels", "correct-class score",
                      run_config, dashed=["random"]),
    )
    write_json(_with_ext(base, ".json"), bundle.to_dict(), run_config)
    return {"curves": len(bundle), "below_random": bundle.below_random()}


def cmd_flip(cfg: RunConfig) -> Dict[str, Any]:
    """Per-class pixel-flipping bundles (quantile, saliency or random-only rankings)"""
    manifest = select_records(load_manifest(cfg.manifest), cfg)
    ckpt = load_checkpoint(cfg.checkpoint)
    images, labels = load_images(manifest, workers=cfg.workers)
    flip = cfg.flip.model_copy(update={"workers": cfg.workers, "show_progress": cfg.show_progress})
    # fill is the mean over every selected image, not per class
    fill_all = fill_values(flip.fill, images, flip.constant)
    seeds = list(range(flip.random_seed, flip.random_seed + cfg.random_seeds))
    quantiles = [flip.quantile] if flip.quantile is not None else cfg.quantiles
    ig = IGConfig(steps=cfg.ig_steps)
    aggregation = cfg.aggregation or "absolute"

    results: Dict[str, Any] = {}
    for class_index, class_name in enumerate(manifest.class_names):
        chosen = np.flatnonzero(labels == class_index)
        if cfg.limit is not None:
            chosen = chosen[:cfg.limit]
        if len(chosen) == 0:
            continue
        x, y, fill = images[chosen], labels[chosen], fill_all[chosen]
        if flip.ranking == "quantile":
            bundle = pf_mcd_experiment(ckpt, x, y, cfg.methods, quantiles, _mcd_config(cfg, DEFAULT_FLIP_SAMPLES),
                                       flip, seeds, ig, aggregation, fill)
        elif flip.ranking == "saliency":
            bundle = pf_saliency_experiment(ckpt, x, y, cfg.methods, flip, seeds, ig, aggregation, fill)
        else:
            bundle = FlipBundle(curves={}, random=pf_random_baseline(ckpt, x, y, flip, seeds, fill))
        results[class_name] = _write_bundle(cfg, class_name, bundle)
        logger.info(f"Flip bundle for {class_name}: {results[class_name]['curves']} curves")
    if not results:
        raise DataError("No samples for the requested classes")
    return {"classes": results}


COMMANDS: Dict[str, Callable[[RunConfig], Dict[str, Any]]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "localise": cmd_localise,
    "mcd": cmd_mcd,
    "flip": cmd_flip,
}


def run_command(cfg: RunConfig) -> Dict[str, Any]:
    cfg.check_paths()
    cfg.out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running {cfg.subcommand} (seed {cfg.seed}) into {cfg.out}")
    return COMMANDS[cfg.subcommand](cfg)


def _csv(kind: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(text: str) -> List[Any]:
        return [kind(item.strip()) for item in text.split(",") if item.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file of run settings")
    common.add_argument("--manifest", type=Path)
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--out", type=Path)
    common.add_argument("--seed", type=int)
    common.add_argument("--methods", type=_csv(str), help="comma-separated attribution methods")
    common.add_argument("--split", help="manifest split to use, or 'all'")
    common.add_argument("--limit", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--progress", dest="show_progress", action="store_const", const=True)
    common.add_argument("--log-level")

    parser = argparse.ArgumentParser(prog="xai-eval", description="Evaluate saliency explanations of a CNN classifier")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("synth", parents=[common], help="generate the synthetic shapes dataset")

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--val-split")
    p.add_argument("--split-ratio", type=float)

    p = sub.add_parser("eval", parents=[common], help="top-k accuracy and confusion matrix")
    p.add_argument("--topk", type=_csv(int))

    p = sub.add_parser("explain", parents=[common], help="saliency rasters and heatmaps")
    p.add_argument("--aggregation")
    p.add_argument("--ig-steps", type=int)

    p = sub.add_parser("localise", parents=[common], help="localisation metrics table")
    p.add_argument("--metrics", type=_csv(str))
    p.add_argument("--k", type=int)
    p.add_argument("--part")
    p.add_argument("--aggregation")
    p.add_argument("--ig-steps", type=int)
    p.add_argument("--random-maps", type=int)

    for name, help_text in (("mcd", "MC-Dropout distributions and quantile maps"),
                            ("flip", "pixel-flipping curves with MCD quantile rankings")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--samples", dest="mcd_samples", type=int)
        p.add_argument("--mcd-seed", type=int)
        p.add_argument("--dropout-rate", type=float)
        p.add_argument("--quantiles", type=_csv(float))
        p.add_argument("--aggregation")
        p.add_argument("--ig-steps", type=int)
        if name == "mcd":
            p.add_argument("--quantile-method")
        else:
            p.add_argument("--classes", type=_csv(str))
            p.add_argument("--random-seeds", type=int)
            p.add_argument("--fill", dest="flip_fill")
            p.add_argument("--fill-constant", dest="flip_constant", type=float)
            p.add_argument("--step", dest="flip_step", type=float)
            p.add_argument("--max-fraction", dest="flip_max_fraction", type=float)
            p.add_argument("--patch-size", dest="flip_patch_size", type=int)
            p.add_argument("--ranking", dest="flip_ranking")
            p.add_argument("--random-seed", dest="flip_random_seed", type=int)
    return parser


def flags_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Explicitly given flags as RunConfig fields (flip_* go to the flip section)"""
    skip = {"subcommand", "config", "log_level"}
    flags: Dict[str, Any] = {}
    flip: Dict[str, Any] = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if key.startswith("flip_"):
            flip[key[len("flip_"):]] = value
        else:
            flags[key] = value
    if flip:
        flags["flip"] = flip
    return flags


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = resolve_config(args.subcommand, flags_from_args(args), args.config)
        result = run_command(cfg)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.subcommand} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return code
    print(json.dumps({"subcommand": cfg.subcommand, "out": str(cfg.out)}, sort_keys=True))
    return EXIT_OK
