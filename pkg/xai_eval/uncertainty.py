"""
Monte-Carlo Dropout: predictive distributions and per-pixel quantile saliency maps

Sample t runs the network with dropout active under the stream seeded
base + t. Each sample is a separate batch-1 pass, so any sample can be
recomputed alone, and with rate 0 every sample equals the deterministic
pass bit for bit. The explanation of sample t reuses that sample's mask
for its forward and backward passes (and for every IG path step).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from xai_eval.attribution import IGConfig, SaliencyMap, explain
from xai_eval.errors import ComputationError, ShapeError, UsageError
from xai_eval.model import Checkpoint, DropoutState, forward, predicted_label, softmax_probs
from xai_eval.rasters import write_raster
from xai_eval.tensor import RngStream, Tensor, no_grad

logger = logging.getLogger(__name__)

T = TypeVar("T")

ROW_SUM_TOLERANCE = 1e-6


class MCDConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    samples: int = Field(default=500, ge=1)
    dropout_rate: Optional[float] = None
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    show_progress: bool = False

    @field_validator("dropout_rate")
    @classmethod
    def _rate_range(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        return v


def sample_state(ckpt: Checkpoint, cfg: MCDConfig, t: int) -> DropoutState:
    """Dropout state of MCD sample t (one mask shared by the whole pass)"""
    if not ckpt.spec.has_dropout:
        raise UsageError("Monte-Carlo Dropout needs a model with a dropout layer")
    rate = ckpt.spec.dropout_rate if cfg.dropout_rate is None else cfg.dropout_rate
    mask = ckpt.dropout_mask(RngStream(cfg.seed + t, "mcd"), rate)
    return DropoutState(active=True, mask=mask, rate=rate)


def _map_samples(fn: Callable[[int], T], cfg: MCDConfig, desc: str) -> List[T]:
    indices = range(cfg.samples)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(tqdm(pool.map(fn, indices), total=cfg.samples, desc=desc, disable=not cfg.show_progress))
    return [fn(t) for t in tqdm(indices, desc=desc, disable=not cfg.show_progress)]


@dataclass
class PredictiveDistribution:
    """T x classes softmax probabilities from T stochastic passes"""

    probs: np.ndarray
    seed: int = 0
    class_names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ShapeError(f"predictive distribution must be T x classes, got {self.probs.shape}")
        drift = np.abs(self.probs.sum(axis=1) - 1.0)
        if drift.size and drift.max() > ROW_SUM_TOLERANCE:
            raise ComputationError(f"probability rows drift from 1 by {drift.max():.2e}")

    @property
    def samples(self) -> int:
        return int(self.probs.shape[0])

    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.probs.std(axis=0, ddof=1) if self.samples > 1 else np.zeros(self.probs.shape[1])

    def summary(self, label: int, quantiles: Sequence[float] = (0.25, 0.5, 0.75)) -> Dict[str, Any]:
        column = self.probs[:, label]
        out: Dict[str, Any] = {
            "label": int(label),
            "samples": self.samples,
            "mean": float(column.mean()),
            "std": float(self.std()[label]),
            "min": float(column.min()),
            "max": float(column.max()),
        }
        for q in quantiles:
            out[f"q{q:g}"] = float(_quantile_sorted(np.sort(column)[:, None], q)[0])
        return out

    def histogram(self, label: int, bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.probs[:, label], bins=bins, range=(0.0, 1.0))


def mcd_predict(ckpt: Checkpoint, image: Union[Tensor, np.ndarray], cfg: Optional[MCDConfig] = None) -> PredictiveDistribution:
    """T seeded stochastic forward passes; row t comes from seed cfg.seed + t"""
    cfg = cfg or MCDConfig()
    x = (image.data if isinstance(image, Tensor) else np.asarray(image))[None]

    def _sample(t: int) -> np.ndarray:
        with no_grad():
            logits = forward(ckpt, x, sample_state(ckpt, cfg, t)).data
        return softmax_probs(logits)[0]

    rows = _map_samples(_sample, cfg, "mcd")
    logger.debug(f"MCD predict: {cfg.samples} samples from seed {cfg.seed}")
    return PredictiveDistribution(np.stack(rows), seed=cfg.seed, class_names=ckpt.class_names)


@dataclass
class SaliencyStack:
    """T saliency maps of one image, one per MCD sample"""

    values: np.ndarray
    method: str
    label: int
    aggregation: str
    seed: int = 0

    @property
    def samples(self) -> int:
        return int(self.values.shape[0])

    def maps(self) -> List[SaliencyMap]:
        return [
            SaliencyMap(v, self.method, self.label, self.aggregation,
                        metadata={"seed_lineage": {"mcd_seed": self.seed + t, "sample": t}})
            for t, v in enumerate(self.values)
        ]

    def save(self, path: Union[str, Path], run_config: Optional[Mapping[str, Any]] = None) -> Path:
        """All T maps in one raster; the sidecar indexes sample t to seed base + t"""
        index = [{"sample": t, "seed": self.seed + t} for t in range(self.samples)]
        meta = {"method": self.method, "label": self.label, "aggregation": self.aggregation,
                "samples": self.samples, "index": index}
        return write_raster(path, self.values, meta, run_config)


def mcd_saliency_stack(ckpt: Checkpoint, image: Union[Tensor, np.ndarray], label: Optional[int], method: str,
                       cfg: Optional[MCDConfig] = None, aggregation: str = "raw-sum",
                       ig: Optional[IGConfig] = None) -> SaliencyStack:
    """
    One explanation per MCD sample

    Args:
        label: attribution target; None fixes it to the deterministic prediction
    """
    cfg = cfg or MCDConfig()
    if label is None:
        label = predicted_label(ckpt, image)

    def _sample(t: int) -> np.ndarray:
        state = sample_state(ckpt, cfg, t)
        return explain(method, ckpt, image, label, aggregation, ig, dropout_state=state).values

    values = np.stack(_map_samples(_sample, cfg, f"mcd {method}"))
    return SaliencyStack(values=values, method=method, label=int(label), aggregation=aggregation, seed=cfg.seed)


def _quantile_sorted(ordered: np.ndarray, q: float, method: str = "linear") -> np.ndarray:
    """q-th quantile along axis 0 of an already sorted stack"""
    n = ordered.shape[0]
    if method == "nearest":
        rank = max(int(np.ceil(q * n)) - 1, 0)
        return ordered[rank]
    if method != "linear":
        raise UsageError(f"Unknown quantile method: {method}")
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    a, b = ordered[lo], ordered[hi]
    # clamping keeps maps monotone in q despite rounding
    return np.clip(a + frac * (b - a), a, b)


@dataclass
class QuantileSaliencyMap:
    q: float
    values: np.ndarray
    method: str
    samples: int
    label: int = -1
    aggregation: str = "raw-sum"
    quantile_method: str = "linear"

    def to_saliency_map(self) -> SaliencyMap:
        return SaliencyMap(self.values, self.method, self.label, self.aggregation,
                           metadata={"quantile": self.q, "samples": self.samples,
                                     "quantile_method": self.quantile_method})


def _stack_values(stack: Union[SaliencyStack, np.ndarray]) -> np.ndarray:
    values = stack.values if isinstance(stack, SaliencyStack) else np.asarray(stack)
    if values.ndim != 3:
        raise ShapeError(f"saliency stack must be T x H x W, got {values.shape}")
    if values.shape[0] == 0:
        raise UsageError("cannot take quantiles of an empty saliency stack")
    return values


def quantile_map(stack: Union[SaliencyStack, np.ndarray], q: float, method: str = "linear") -> QuantileSaliencyMap:
    """
    Per-pixel q-th quantile over the stack

    method "linear" interpolates between adjacent order statistics;
    "nearest" returns the order statistic of rank ceil(q * T).
    """
    if not 0.0 <= q <= 1.0:
        raise UsageError(f"quantile must lie in [0, 1], got {q}")
    values = _stack_values(stack)
    ordered = np.sort(values.astype(np.float64), axis=0)
    result = _quantile_sorted(ordered, q, method)
    meta = stack if isinstance(stack, SaliencyStack) else None
    return QuantileSaliencyMap(
        q=q,
        values=result,
        method=meta.method if meta else "unknown",
        samples=values.shape[0],
        label=meta.label if meta else -1,
        aggregation=meta.aggregation if meta else "raw-sum",
        quantile_method=method,
    )


def quantile_maps(stack: Union[SaliencyStack, np.ndarray], qs: Sequence[float] = (0.25, 0.5, 0.75),
                  method: str = "linear") -> List[QuantileSaliencyMap]:
    return [quantile_map(stack, q, method) for q in qs]
