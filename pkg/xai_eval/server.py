import asyncio
import functools
import logging
from typing import Any, Awaitable, Callable, Dict, List, Optional, TypeVar, cast

from mcp.server.fastmcp import FastMCP

from xai_eval.cli import run_command
from xai_eval.config import resolve_config, setup_logging
from xai_eval.errors import handle_errors
from xai_eval.report import to_jsonable

setup_logging()
logger = logging.getLogger(__name__)

T = TypeVar('T')

mcp = FastMCP("XAI Evaluation Toolkit")


def async_handler(command_type: str):
    """
    Simple decorator that logs the command

    Args:
        command_type: The type of command (for logging)
    """
    def decorator(func: Callable[..., Awaitable[T]]) -> Callable[..., Awaitable[T]]:
        @functools.wraps(func)
        async def wrapper(*args: Any, **kwargs: Any) -> T:
            logger.info(f"Executing command: {command_type}")
            return await func(*args, **kwargs)
        return cast(Callable[..., Awaitable[T]], wrapper)
    return decorator


async def _run(subcommand: str, options: Optional[Dict[str, Any]], **flags: Any) -> Dict[str, Any]:
    """Resolve a RunConfig (tool arguments win over options) and run it off the event loop"""
    merged = {**(options or {}), **{k: v for k, v in flags.items() if v is not None}}
    cfg = resolve_config(subcommand, merged)
    result = await asyncio.to_thread(run_command, cfg)
    return to_jsonable({"run_config": cfg.artifact_config(), "result": result})


@mcp.tool()
@async_handler("synth")
@handle_errors
async def synth(out: str, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Generate the synthetic shapes dataset (images, part masks, manifest)

    Args:
        out: Output directory; the manifest is written to <out>/manifest.json
        seed: Global seed; regeneration with the same seed is byte-identical
        options: Other run settings, e.g. {"synthetic": {"image_size": 32}}

    Returns:
        Manifest path, image count, class names and splits
    """
    return await _run("synth", options, out=out, seed=seed)


@mcp.tool()
@async_handler("train")
@handle_errors
async def train(manifest: str, out: str, epochs: Optional[int] = None, seed: Optional[int] = None,
                options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Train the CNN classifier on the manifest's train split

    Args:
        manifest: Path to the dataset manifest JSON
        out: Output directory for model.ckpt and train_log.csv
        epochs: Number of epochs (default 20)
        seed: Seed for initialization, shuffling and dropout
        options: Other run settings (lr, batch_size, dropout_rate, val_split, ...)

    Returns:
        Checkpoint path, log path and final losses
    """
    return await _run("train", options, manifest=manifest, out=out, epochs=epochs, seed=seed)


@mcp.tool()
@async_handler("evaluate")
@handle_errors
async def evaluate(manifest: str, checkpoint: str, out: str, split: str = "test",
                   options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Top-1/top-3 accuracy and confusion matrix on one split

    Args:
        manifest: Path to the dataset manifest JSON
        checkpoint: Path to a trained checkpoint
        out: Output directory for eval.json and confusion.csv
        split: Manifest split to evaluate, or "all"
        options: Other run settings (topk, limit, classes, ...)
    """
    return await _run("eval", options, manifest=manifest, checkpoint=checkpoint, out=out, split=split)


@mcp.tool()
@async_handler("explain")
@handle_errors
async def explain(manifest: str, checkpoint: str, out: str, methods: Optional[List[str]] = None,
                  limit: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Saliency rasters and heatmaps w.r.t. the predicted label

    Args:
        manifest: Path to the dataset manifest JSON
        checkpoint: Path to a trained checkpoint
        out: Output directory (maps/<method>/...)
        methods: Subset of gradient, gradient_x_input, integrated_gradients
        limit: Explain only the first N selected images
        options: Other run settings (aggregation, ig_steps, split, ...)
    """
    return await _run("explain", options, manifest=manifest, checkpoint=checkpoint, out=out,
                      methods=methods, limit=limit)


@mcp.tool()
@async_handler("localise")
@handle_errors
async def localise(manifest: str, checkpoint: str, out: str, methods: Optional[List[str]] = None,
                   k: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Localisation metrics (pointing game, attribution localisation, top-k
    intersection, relevance rank accuracy, AUC) per method

    Args:
        manifest: Path to the dataset manifest JSON (records need masks)
        checkpoint: Path to a trained checkpoint
        out: Output directory for localisation.csv and localisation.json
        methods: Attribution methods to compare
        k: Pixel count of the top-k intersection (default 1000, clipped to the image)
        options: Other run settings (part, aggregation, metrics, random_maps, ...)

    Returns:
        Metric means per method, skipped-sample tallies and the random-map baseline
    """
    return await _run("localise", options, manifest=manifest, checkpoint=checkpoint, out=out,
                      methods=methods, k=k)


@mcp.tool()
@async_handler("mcd")
@handle_errors
async def mcd(manifest: str, checkpoint: str, out: str, samples: Optional[int] = None,
              limit: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Monte-Carlo Dropout predictive distributions and quantile saliency maps

    Args:
        manifest: Path to the dataset manifest JSON
        checkpoint: Path to a trained checkpoint
        out: Output directory (mcd/...)
        samples: Number of stochastic passes T (default 500)
        limit: Number of images (default: the first selected image)
        options: Other run settings (mcd_seed, quantiles, methods, dropout_rate, ...)
    """
    return await _run("mcd", options, manifest=manifest, checkpoint=checkpoint, out=out,
                      mcd_samples=samples, limit=limit)


@mcp.tool()
@async_handler("flip")
@handle_errors
async def flip(manifest: str, checkpoint: str, out: str, classes: Optional[List[str]] = None,
               samples: Optional[int] = None, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Pixel-flipping curves ranked by MCD quantile maps, with a random baseline

    Args:
        manifest: Path to the dataset manifest JSON
        checkpoint: Path to a trained checkpoint
        out: Output directory (flip/<class>.csv|svg|json)
        classes: Classes to run (default: all)
        samples: MCD passes per explanation (default 100)
        options: Other run settings, e.g. {"flip": {"step": 0.05}, "random_seeds": 20}

    Returns:
        Curve count and below-random fraction per curve, per class
    """
    return await _run("flip", options, manifest=manifest, checkpoint=checkpoint, out=out,
                      classes=classes, mcd_samples=samples)
