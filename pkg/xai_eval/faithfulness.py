"""
Pixel-flipping faithfulness curves

Pixels are replaced (all channels) by a fill value in ranking order over a
fixed grid of flipped fractions; at each step the deterministic model is
re-evaluated on the whole sample set. A faithful ranking drives the
correct-class score down faster than a random one.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid
from tqdm import tqdm

from xai_eval.attribution import IGConfig, SaliencyMap, explain
from xai_eval.data import SegMask
from xai_eval.errors import DataError, ShapeError, UsageError
from xai_eval.localisation import ranking
from xai_eval.model import Checkpoint, predict_logits, predicted_label, rank_classes, softmax_probs
from xai_eval.tensor import RngStream
from xai_eval.uncertainty import MCDConfig, mcd_saliency_stack, quantile_maps

logger = logging.getLogger(__name__)

FillStrategy = Literal["constant", "dataset-mean", "per-image-mean"]


class FlipConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fill: FillStrategy = "dataset-mean"
    constant: float = 0.0
    step: float = 0.01
    max_fraction: float = 0.5
    ranking: Literal["saliency", "quantile", "random"] = "quantile"
    quantile: Optional[float] = None
    random_seed: int = 0
    patch_size: int = Field(default=1, ge=1)
    batch_size: int = Field(default=64, ge=1)
    workers: int = Field(default=1, ge=1)
    show_progress: bool = False

    @model_validator(mode="after")
    def _grid(self) -> "FlipConfig":
        if not 0.0 < self.step <= self.max_fraction <= 1.0:
            raise ValueError("flip grid needs 0 < step <= max_fraction <= 1")
        if self.quantile is not None and not 0.0 <= self.quantile <= 1.0:
            raise ValueError("quantile must lie in [0, 1]")
        return self

    def fractions(self) -> np.ndarray:
        count = int(math.floor(self.max_fraction / self.step + 1e-9)) + 1
        return np.arange(count, dtype=np.float64) * self.step


def flip_pixels(image: np.ndarray, order: np.ndarray, n: int, fill: Union[float, np.ndarray]) -> np.ndarray:
    """
    Copy of a (C, H, W) image with its first n ranked pixels set to fill

    Args:
        order: flat pixel indices, most relevant first
        fill: scalar or per-channel (C,) value
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"flip_pixels expects (C, H, W), got {image.shape}")
    c, h, w = image.shape
    if not 0 <= n <= h * w:
        raise UsageError(f"flip count {n} outside [0, {h * w}]")
    if n > len(order):
        raise UsageError(f"ranking holds {len(order)} pixels, cannot flip {n}")
    out = image.copy()
    idx = np.asarray(order[:n], dtype=np.int64)
    fill_c = np.broadcast_to(np.asarray(fill, dtype=image.dtype).reshape(-1), (c,))
    flat = out.reshape(c, h * w)
    flat[:, idx] = fill_c[:, None]
    return out


def ranking_from_map(values: Union[SaliencyMap, np.ndarray], patch_size: int = 1) -> np.ndarray:
    """
    Pixel order by descending relevance (ties to the lower index)

    With patch_size p > 1 the map is tiled into p x p patches ranked by mean
    relevance; pixels of one patch stay together in linear order.
    """
    v = values.values if isinstance(values, SaliencyMap) else np.asarray(values)
    if patch_size <= 1:
        return ranking(v)
    h, w = v.shape
    rows, cols = np.indices((h, w))
    per_row = -(-w // patch_size)
    patch_id = ((rows // patch_size) * per_row + cols // patch_size).ravel()
    counts = np.bincount(patch_id)
    means = np.bincount(patch_id, weights=v.astype(np.float64).ravel()) / counts
    patch_rank = np.empty_like(patch_id[:len(means)])
    patch_rank[np.argsort(-means, kind="stable")] = np.arange(len(means))
    return np.lexsort((np.arange(h * w), patch_rank[patch_id]))


def random_ranking(shape: Tuple[int, int], rng: RngStream, patch_size: int = 1) -> np.ndarray:
    """Uniformly random pixel (or patch) order"""
    return ranking_from_map(rng.random(shape), patch_size)


def oracle_ranking(mask: Union[SegMask, np.ndarray]) -> np.ndarray:
    """Mask pixels first, then the rest, each in linear order"""
    m = mask.union if isinstance(mask, SegMask) else np.asarray(mask, dtype=bool)
    flat = m.ravel()
    return np.concatenate([np.flatnonzero(flat), np.flatnonzero(~flat)])


def fill_values(strategy: str, images: np.ndarray, constant: float = 0.0) -> np.ndarray:
    """Per-image, per-channel fill values, shape (N, C)"""
    images = np.asarray(images)
    n, c = images.shape[:2]
    if strategy == "constant":
        return np.full((n, c), constant, dtype=images.dtype)
    if strategy == "dataset-mean":
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        return np.broadcast_to(mean, (n, c)).astype(images.dtype)
    if strategy == "per-image-mean":
        return images.mean(axis=(2, 3), dtype=np.float64).astype(images.dtype)
    raise UsageError(f"Unknown fill strategy: {strategy}")


@dataclass
class FlippingCurve:
    name: str
    fractions: np.ndarray
    scores: np.ndarray
    accuracies: np.ndarray
    n_samples: int
    score_sem: Optional[np.ndarray] = None
    per_seed_scores: Optional[np.ndarray] = None
    final_predictions: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.fractions)

    def area(self) -> float:
        """Trapezoidal area under the score curve"""
        return float(trapezoid(self.scores, self.fractions))

    def below(self, baseline: "FlippingCurve") -> float:
        """Fraction of grid points past 0 where this curve's score is under the baseline's"""
        if not np.array_equal(self.fractions, baseline.fractions):
            raise UsageError("curves are on different flip grids")
        later = self.fractions > 0
        if not later.any():
            return 0.0
        return float(np.mean(self.scores[later] < baseline.scores[later]))

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "name": self.name,
            "n_samples": self.n_samples,
            "fractions": self.fractions,
            "scores": self.scores,
            "accuracies": self.accuracies,
            "area": self.area(),
            **self.metadata,
        }
        if self.score_sem is not None:
            out["score_sem"] = self.score_sem
        return out


def _check_samples(images: np.ndarray, labels: Sequence[int], orders: Sequence[np.ndarray]) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("pixel flipping needs a non-empty (N, C, H, W) sample set")
    if len(labels) != len(images) or len(orders) != len(images):
        raise UsageError(f"{len(images)} images, {len(labels)} labels, {len(orders)} rankings")
    return images


def pf_curve(ckpt: Checkpoint, images: np.ndarray, labels: Sequence[int], orders: Sequence[np.ndarray],
             cfg: Optional[FlipConfig] = None, fill: Optional[np.ndarray] = None,
             name: str = "saliency") -> FlippingCurve:
    """
    Flipping curve over the whole sample set

    Point i flips round(f_i * pixels) pixels of every image and records the
    mean correct-class softmax score and the top-1 accuracy with dropout
    inactive.

    Args:
        orders: one flat pixel ranking per image
        fill: (N, C) fill values; default resolved from cfg.fill over `images`
    """
    cfg = cfg or FlipConfig()
    images = _check_samples(images, labels, orders)
    labels = np.asarray(labels, dtype=np.int64)
    fill = fill_values(cfg.fill, images, cfg.constant) if fill is None else np.asarray(fill)
    pixels = images.shape[2] * images.shape[3]
    fractions = cfg.fractions()

    work = images.copy()
    flipped = 0
    scores, accuracies = [], []
    predictions = np.zeros(len(images), dtype=np.int64)
    for fraction in tqdm(fractions, desc=f"flip {name}", disable=not cfg.show_progress):
        n = int(round(fraction * pixels))
        if n > flipped:
            for i in range(len(work)):
                # flipping the next slice of the prefix equals flipping the whole prefix
                work[i] = flip_pixels(work[i], orders[i][flipped:], n - flipped, fill[i])
            flipped = n
        probs = softmax_probs(predict_logits(ckpt, work, batch_size=cfg.batch_size, workers=cfg.workers))
        predictions = rank_classes(probs)[:, 0]
        scores.append(math.fsum(probs[np.arange(len(labels)), labels]) / len(labels))
        accuracies.append(float(np.mean(predictions == labels)))

    return FlippingCurve(
        name=name,
        fractions=fractions,
        scores=np.asarray(scores),
        accuracies=np.asarray(accuracies),
        n_samples=len(images),
        final_predictions=np.asarray(predictions),
        metadata={"fill": cfg.fill, "patch_size": cfg.patch_size, "dropout": "inactive"},
    )


def random_rankings(images: np.ndarray, seed: int, patch_size: int = 1) -> List[np.ndarray]:
    """One random ranking per image, image i from stream (seed, pf/random/i)"""
    shape = tuple(np.asarray(images).shape[2:])
    streams = RngStream(seed, "pf/random")
    return [random_ranking(shape, streams.child(i), patch_size) for i in range(len(images))]


def pf_random_baseline(ckpt: Checkpoint, images: np.ndarray, labels: Sequence[int],
                       cfg: Optional[FlipConfig] = None, seeds: Sequence[int] = tuple(range(20)),
                       fill: Optional[np.ndarray] = None) -> FlippingCurve:
    """Pointwise mean (and standard error) of random-ranking curves over seeds"""
    cfg = cfg or FlipConfig()
    if len(seeds) < 1:
        raise UsageError("random baseline needs at least one seed")
    curves = [
        pf_curve(ckpt, images, labels, random_rankings(images, s, cfg.patch_size), cfg, fill, name=f"random/{s}")
        for s in seeds
    ]
    per_seed = np.stack([c.scores for c in curves])
    sem = per_seed.std(axis=0, ddof=1) / math.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros(per_seed.shape[1])
    return FlippingCurve(
        name="random",
        fractions=curves[0].fractions,
        scores=per_seed.mean(axis=0),
        accuracies=np.stack([c.accuracies for c in curves]).mean(axis=0),
        n_samples=curves[0].n_samples,
        score_sem=sem,
        per_seed_scores=per_seed,
        metadata={**curves[0].metadata, "seeds": list(seeds)},
    )


@dataclass
class FlipBundle:
    """Saliency-derived curves plus the random baseline on one grid"""

    curves: Dict[str, FlippingCurve]
    random: FlippingCurve
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.curves) + 1

    def below_random(self) -> Dict[str, float]:
        return {name: curve.below(self.random) for name, curve in self.curves.items()}

    def csv_table(self) -> Tuple[List[str], List[List[Any]]]:
        header = ["fraction"]
        for name in self.curves:
            header += [f"{name}_score", f"{name}_accuracy"]
        header += ["random_mean", "random_sem", "random_accuracy"]
        sem = self.random.score_sem if self.random.score_sem is not None else np.zeros(len(self.random))
        rows = []
        for i, fraction in enumerate(self.random.fractions):
            row: List[Any] = [float(fraction)]
            for curve in self.curves.values():
                row += [float(curve.scores[i]), float(curve.accuracies[i])]
            row += [float(self.random.scores[i]), float(sem[i]), float(self.random.accuracies[i])]
            rows.append(row)
        return header, rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "curves": {name: c.to_dict() for name, c in self.curves.items()},
            "random": self.random.to_dict(),
            "below_random": self.below_random(),
            **self.metadata,
        }


def curve_name(method: str, q: float) -> str:
    return f"{method}@q{q:g}"


def pf_mcd_experiment(ckpt: Checkpoint, images: np.ndarray, labels: Sequence[int],
                      methods: Sequence[str] = ("gradient", "gradient_x_input", "integrated_gradients"),
                      quantiles: Sequence[float] = (0.25, 0.5, 0.75),
                      mcd: Optional[MCDConfig] = None, cfg: Optional[FlipConfig] = None,
                      seeds: Sequence[int] = tuple(range(20)), ig: Optional[IGConfig] = None,
                      aggregation: str = "absolute", fill: Optional[np.ndarray] = None) -> FlipBundle:
    """
    Per-class flipping experiment with MCD quantile rankings

    For every image and method, T MCD explanations (target: the deterministic
    predicted label) are reduced to per-pixel quantile maps; each quantile
    map ranks the pixels of one curve. Curves are evaluated on the
    deterministic model, alongside a random baseline over `seeds`.
    """
    mcd = mcd or MCDConfig(samples=100)
    cfg = cfg or FlipConfig()
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("pixel flipping needs a non-empty sample set")
    if len(np.unique(labels)) != 1:
        raise UsageError("pf_mcd_experiment expects samples of a single class")
    fill = fill_values(cfg.fill, images, cfg.constant) if fill is None else np.asarray(fill)

    orders: Dict[str, List[np.ndarray]] = {curve_name(m, q): [] for m in methods for q in quantiles}
    for i, image in enumerate(images):
        target = predicted_label(ckpt, image)
        for method in methods:
            stack = mcd_saliency_stack(ckpt, image, target, method, mcd, aggregation=aggregation, ig=ig)
            for qmap in quantile_maps(stack, quantiles):
                orders[curve_name(method, qmap.q)].append(ranking_from_map(qmap.values, cfg.patch_size))
        logger.debug(f"PF-MCD rankings ready for sample {i + 1}/{len(images)}")

    curves = {name: pf_curve(ckpt, images, labels, o, cfg, fill, name=name) for name, o in orders.items()}
    random = pf_random_baseline(ckpt, images, labels, cfg, seeds, fill)
    bundle = FlipBundle(
        curves=curves,
        random=random,
        metadata={"label": int(labels[0]), "mcd_samples": mcd.samples, "mcd_seed": mcd.seed,
                  "aggregation": aggregation, "quantiles": list(quantiles), "methods": list(methods)},
    )
    for name, frac in bundle.below_random().items():
        logger.info(f"{name}: below random at {frac:.0%} of steps")
    return bundle


def pf_saliency_experiment(ckpt: Checkpoint, images: np.ndarray, labels: Sequence[int],
                           methods: Sequence[str] = ("gradient", "gradient_x_input", "integrated_gradients"),
                           cfg: Optional[FlipConfig] = None, seeds: Sequence[int] = tuple(range(20)),
                           ig: Optional[IGConfig] = None, aggregation: str = "absolute",
                           fill: Optional[np.ndarray] = None) -> FlipBundle:
    """Flipping curves ranked by deterministic saliency maps, one per method, plus the random baseline"""
    cfg = cfg or FlipConfig()
    images = np.asarray(images)
    if len(images) == 0:
        raise DataError("pixel flipping needs a non-empty sample set")
    fill = fill_values(cfg.fill, images, cfg.constant) if fill is None else np.asarray(fill)
    curves: Dict[str, FlippingCurve] = {}
    for method in methods:
        orders = [
            ranking_from_map(explain(method, ckpt, image, None, aggregation, ig), cfg.patch_size)
            for image in images
        ]
        curves[method] = pf_curve(ckpt, images, labels, orders, cfg, fill, name=method)
    random = pf_random_baseline(ckpt, images, labels, cfg, seeds, fill)
    return FlipBundle(curves=curves, random=random,
                      metadata={"aggregation": aggregation, "methods": list(methods), "ranking": "saliency"})
