"""
Localisation metrics: how much of a saliency map's hot mass falls in the object mask

Ranking uses descending relevance with ties broken by the lower linear
(row-major) pixel index.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata

from xai_eval.attribution import SaliencyMap
from xai_eval.data import SegMask
from xai_eval.errors import ComputationError, DegenerateMapError, EmptyMaskError, ShapeError, UsageError
from xai_eval.tensor import RngStream

logger = logging.getLogger(__name__)

MapLike = Union[SaliencyMap, np.ndarray]
MaskLike = Union[SegMask, np.ndarray]

METRIC_TITLES = {
    "pointing_game": "Pointing Game",
    "attribution_localisation": "Attribution Localisation",
    "top_k_intersection": "Top-K Intersection",
    "relevance_rank_accuracy": "Relevance Rank Accuracy",
    "auc": "AUC",
}


def _flat(values: MapLike, mask: MaskLike, part: str = "union") -> Tuple[np.ndarray, np.ndarray]:
    v = values.values if isinstance(values, SaliencyMap) else np.asarray(values)
    m = mask.part(part) if isinstance(mask, SegMask) else np.asarray(mask, dtype=bool)
    if v.shape != m.shape:
        raise ShapeError(f"map shape {v.shape} does not match mask shape {m.shape}")
    return v.astype(np.float64).ravel(), m.ravel()


def ranking(values: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending value, ties to the lower index"""
    return np.argsort(-np.asarray(values, dtype=np.float64).ravel(), kind="stable")


def pointing_game(values: MapLike, mask: MaskLike) -> float:
    """1.0 iff the (first) maximum pixel lies in the mask"""
    v, m = _flat(values, mask)
    if not m.any():
        raise EmptyMaskError("pointing game needs a non-empty mask")
    return float(m[int(np.argmax(v))])


def attribution_localisation(values: MapLike, mask: MaskLike) -> float:
    """Share of the positive relevance mass inside the mask"""
    v, m = _flat(values, mask)
    if not m.any():
        raise EmptyMaskError("attribution localisation needs a non-empty mask")
    positive = np.maximum(v, 0.0)
    total = math.fsum(positive)
    if total <= 0.0:
        raise DegenerateMapError("degenerate map: no positive relevance mass")
    return math.fsum(positive[m]) / total


def top_k_intersection(values: MapLike, mask: MaskLike, k: int) -> float:
    v, m = _flat(values, mask)
    if not 1 <= k <= v.size:
        raise UsageError(f"k must lie in [1, {v.size}], got {k}")
    return int(m[ranking(v)[:k]].sum()) / k


def relevance_rank_accuracy(values: MapLike, mask: MaskLike) -> float:
    """Top-|mask| intersection"""
    _, m = _flat(values, mask)
    size = int(m.sum())
    if size == 0:
        raise EmptyMaskError("relevance rank accuracy needs a non-empty mask")
    return top_k_intersection(values, mask, size)


def localisation_auc(values: MapLike, mask: MaskLike) -> float:
    """ROC-AUC of map values against mask membership (average ranks for ties)"""
    v, m = _flat(values, mask)
    pos = int(m.sum())
    neg = v.size - pos
    if pos == 0 or neg == 0:
        raise EmptyMaskError("AUC needs a mask that is neither empty nor full")
    ranks = rankdata(v, method="average")
    u = math.fsum(ranks[m]) - pos * (pos + 1) / 2.0
    return u / (pos * neg)


class LocalisationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=1000, ge=1)
    part: Literal["union", "head", "thorax", "abdomen"] = "union"
    aggregation: Literal["as-is", "positive", "absolute"] = "positive"
    metrics: List[str] = Field(default_factory=lambda: list(METRIC_TITLES))
    workers: int = Field(default=1, ge=1)


@dataclass
class LocalisationResult:
    metric: str
    scores: List[float]
    mean: float
    n: int
    skipped: int = 0
    sample_indices: List[int] = field(default_factory=list)
    skip_reasons: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "n": self.n,
            "skipped": self.skipped,
            "scores": [{"sample": i, "score": s} for i, s in zip(self.sample_indices, self.scores)],
            "skip_reasons": self.skip_reasons,
            "config": self.config,
        }


def _prepare_map(values: MapLike, mode: str) -> np.ndarray:
    if isinstance(values, SaliencyMap):
        return values.reaggregated(mode).values
    v = np.asarray(values)
    if mode == "positive":
        return np.maximum(v, 0.0)
    if mode == "absolute":
        return np.abs(v)
    return v


def _metric_fn(metric: str, k: int) -> Callable[[np.ndarray, np.ndarray], float]:
    if metric == "pointing_game":
        return pointing_game
    if metric == "attribution_localisation":
        return attribution_localisation
    if metric == "top_k_intersection":
        return lambda v, m: top_k_intersection(v, m, min(k, v.size))
    if metric == "relevance_rank_accuracy":
        return relevance_rank_accuracy
    if metric == "auc":
        return localisation_auc
    raise UsageError(f"Unknown localisation metric: {metric}")


def evaluate_localisation(maps: Sequence[MapLike], masks: Sequence[Optional[MaskLike]],
                          cfg: Optional[LocalisationConfig] = None) -> Dict[str, LocalisationResult]:
    """
    Score every (map, mask) pair with each configured metric

    Samples whose metric raises a per-sample error (empty mask, degenerate
    map) or that have no mask are skipped and counted.

    Raises:
        ComputationError: every sample was skipped for some metric
    """
    cfg = cfg or LocalisationConfig()
    if len(maps) != len(masks):
        raise UsageError(f"{len(maps)} maps but {len(masks)} masks")
    fns = {metric: _metric_fn(metric, cfg.k) for metric in cfg.metrics}

    def _score(i: int) -> Dict[str, Union[float, str]]:
        if masks[i] is None:
            return {metric: "no mask" for metric in fns}
        v = _prepare_map(maps[i], cfg.aggregation)
        m = masks[i].part(cfg.part) if isinstance(masks[i], SegMask) else np.asarray(masks[i], dtype=bool)
        out: Dict[str, Union[float, str]] = {}
        for metric, fn in fns.items():
            try:
                out[metric] = fn(v, m)
            except (EmptyMaskError, DegenerateMapError) as e:
                out[metric] = str(e)
        return out

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per_sample = list(pool.map(_score, range(len(maps))))
    else:
        per_sample = [_score(i) for i in range(len(maps))]

    results: Dict[str, LocalisationResult] = {}
    for metric in fns:
        scores: List[float] = []
        indices: List[int] = []
        reasons: List[Dict[str, Any]] = []
        for i, row in enumerate(per_sample):
            value = row[metric]
            if isinstance(value, str):
                reasons.append({"sample": i, "error": value})
                continue
            scores.append(float(value))
            indices.append(i)
        if not scores:
            raise ComputationError(f"{metric}: all {len(maps)} samples were skipped")
        if reasons:
            logger.warning(f"{metric}: skipped {len(reasons)} of {len(maps)} samples")
        results[metric] = LocalisationResult(
            metric=metric,
            scores=scores,
            mean=math.fsum(scores) / len(scores),
            n=len(scores),
            skipped=len(reasons),
            sample_indices=indices,
            skip_reasons=reasons,
            config={"k": cfg.k, "part": cfg.part, "aggregation": cfg.aggregation},
        )
    return results


def random_map_baseline(masks: Sequence[Optional[MaskLike]], n_maps: int = 10, seed: int = 0,
                        cfg: Optional[LocalisationConfig] = None) -> Dict[str, LocalisationResult]:
    """Metric means of uniform random maps over the same masks (chance level)"""
    if n_maps < 1:
        raise UsageError("n_maps must be at least 1")
    cfg = (cfg or LocalisationConfig()).model_copy(update={"aggregation": "as-is"})
    maps: List[np.ndarray] = []
    all_masks: List[Optional[MaskLike]] = []
    for r in range(n_maps):
        streams = RngStream(seed, f"random-map/{r}")
        for i, mask in enumerate(masks):
            if mask is None:
                continue
            shape = (mask.height, mask.width) if isinstance(mask, SegMask) else np.shape(mask)
            maps.append(streams.child(i).random(shape))
            all_masks.append(mask)
    return evaluate_localisation(maps, all_masks, cfg)


def localisation_table(results_by_method: Dict[str, Dict[str, LocalisationResult]]) -> Tuple[List[str], List[List[Any]]]:
    """Rows = metrics, columns = methods, cells = dataset means"""
    methods = list(results_by_method)
    metrics: List[str] = []
    for results in results_by_method.values():
        metrics.extend(m for m in results if m not in metrics)
    header = ["metric"] + methods
    rows = [
        [METRIC_TITLES.get(metric, metric)]
        + [results_by_method[method][metric].mean if metric in results_by_method[method] else ""
           for method in methods]
        for metric in metrics
    ]
    return header, rows
