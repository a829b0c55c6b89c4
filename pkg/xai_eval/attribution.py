"""
Post-hoc feature attribution: gradient, gradient x input, integrated gradients

All methods differentiate the pre-softmax logit of the target label with
respect to the input pixels, then aggregate over channels.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from xai_eval.errors import ShapeError, UsageError
from xai_eval.model import INACTIVE, Checkpoint, DropoutState, forward, predicted_label
from xai_eval.rasters import read_raster, write_heatmap_png, write_raster
from xai_eval.tensor import Tape, Tensor, backward, pick

logger = logging.getLogger(__name__)

Aggregation = Literal["raw-sum", "positive", "absolute"]
AGGREGATIONS = ("raw-sum", "positive", "absolute")
METHODS = ("gradient", "gradient_x_input", "integrated_gradients")

ImageLike = Union[Tensor, np.ndarray]


def aggregate(attribution: np.ndarray, mode: str) -> np.ndarray:
    """
    Collapse a (C, H, W) attribution to (H, W)

    raw-sum sums the channels; positive keeps the positive part of that sum;
    absolute takes its magnitude.
    """
    a = np.asarray(attribution)
    if a.ndim != 3:
        raise ShapeError(f"aggregate expects (C, H, W), got {a.shape}")
    total = a.sum(axis=0, dtype=np.float64)
    if mode == "raw-sum":
        out = total
    elif mode == "positive":
        out = np.maximum(total, 0.0)
    elif mode == "absolute":
        out = np.abs(total)
    else:
        raise UsageError(f"Unknown aggregation mode: {mode}")
    return out.astype(np.float32)


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    label: int
    aggregation: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"saliency map must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError(f"{self.method} produced non-finite relevance values")

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def describe(self) -> Dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "method": self.method,
            "label": self.label,
            "aggregation": self.aggregation,
            **self.metadata,
        }

    def reaggregated(self, mode: str) -> "SaliencyMap":
        """
        Apply positive/absolute to a raw-sum map; "as-is" returns the map unchanged

        Raises:
            UsageError: the map was already reduced by another mode
        """
        if mode == "as-is" or mode == self.aggregation:
            return self
        if self.aggregation != "raw-sum":
            raise UsageError(f"cannot derive {mode} from a {self.aggregation} map")
        if mode == "positive":
            values = np.maximum(self.values, 0.0)
        elif mode == "absolute":
            values = np.abs(self.values)
        else:
            raise UsageError(f"Unknown aggregation mode: {mode}")
        return SaliencyMap(values, self.method, self.label, mode, dict(self.metadata))

    def save(self, path: Union[str, Path], run_config: Optional[Mapping[str, Any]] = None) -> Path:
        return write_raster(path, self.values, self.describe(), run_config)

    def save_heatmap(self, path: Union[str, Path], run_config: Optional[Mapping[str, Any]] = None) -> Path:
        return write_heatmap_png(path, self.values, run_config)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SaliencyMap":
        values, side = read_raster(path)
        known = {"width", "height", "method", "label", "aggregation", "shape", "raster", "run_config"}
        return cls(
            values=values,
            method=side.get("method", "unknown"),
            label=int(side.get("label", -1)),
            aggregation=side.get("aggregation", "raw-sum"),
            metadata={k: v for k, v in side.items() if k not in known},
        )


class IGConfig(BaseModel):
    """Integrated-gradients path: baseline image (None = all zeros) and step count"""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    steps: int = Field(default=64, ge=1)
    baseline: Optional[np.ndarray] = None
    batch_size: int = Field(default=32, ge=1)

    @field_validator("baseline")
    @classmethod
    def _finite(cls, v: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if v is not None and not np.all(np.isfinite(v)):
            raise ValueError("IG baseline must be finite")
        return v


def _image_array(ckpt: Checkpoint, image: ImageLike) -> np.ndarray:
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if tuple(x.shape) != tuple(ckpt.spec.input_shape):
        raise ShapeError(f"image shape {x.shape} does not match model input {ckpt.spec.input_shape}")
    return x.astype(ckpt.dtype, copy=False)


def _check_label(ckpt: Checkpoint, label: int) -> int:
    if not 0 <= int(label) < ckpt.spec.num_classes:
        raise UsageError(f"Invalid label {label}: model has {ckpt.spec.num_classes} classes")
    return int(label)


def input_gradients(ckpt: Checkpoint, images: np.ndarray, label: int,
                    dropout_state: DropoutState = INACTIVE) -> np.ndarray:
    """d logit[label] / d input for every image of an (N, C, H, W) batch"""
    x = Tensor(images, requires_grad=True, dtype=ckpt.dtype)
    with Tape():
        logits = forward(ckpt, x, dropout_state)
        backward(pick(logits, label).sum())
    return x.grad


def gradient(ckpt: Checkpoint, image: ImageLike, label: int, aggregation: str = "raw-sum",
             dropout_state: DropoutState = INACTIVE) -> SaliencyMap:
    x = _image_array(ckpt, image)
    label = _check_label(ckpt, label)
    grad = input_gradients(ckpt, x[None], label, dropout_state)[0]
    return SaliencyMap(aggregate(grad, aggregation), "gradient", label, aggregation)


def gradient_x_input(ckpt: Checkpoint, image: ImageLike, label: int, aggregation: str = "raw-sum",
                     dropout_state: DropoutState = INACTIVE) -> SaliencyMap:
    x = _image_array(ckpt, image)
    label = _check_label(ckpt, label)
    grad = input_gradients(ckpt, x[None], label, dropout_state)[0]
    return SaliencyMap(aggregate(grad * x, aggregation), "gradient_x_input", label, aggregation)


def integrated_gradients(ckpt: Checkpoint, image: ImageLike, label: int, cfg: Optional[IGConfig] = None,
                         aggregation: str = "raw-sum", dropout_state: DropoutState = INACTIVE) -> SaliencyMap:
    """
    Midpoint Riemann sum of the path integral from baseline to image

    Step k evaluates the gradient at b + (k + 0.5) / m * (x - b); the mean
    gradient times (x - b) is the per-channel attribution. Path points are
    evaluated in batches of cfg.batch_size, all with the same dropout state.
    """
    cfg = cfg or IGConfig()
    x = _image_array(ckpt, image)
    label = _check_label(ckpt, label)
    if cfg.baseline is None:
        baseline = np.zeros_like(x)
    else:
        baseline = np.asarray(cfg.baseline, dtype=x.dtype)
        if baseline.shape != x.shape:
            raise ShapeError(f"IG baseline shape {baseline.shape} does not match image {x.shape}")
    delta = x - baseline
    alphas = (np.arange(cfg.steps, dtype=np.float64) + 0.5) / cfg.steps

    total = np.zeros(x.shape, dtype=np.float64)
    for start in range(0, cfg.steps, cfg.batch_size):
        a = alphas[start:start + cfg.batch_size].astype(x.dtype)[:, None, None, None]
        path = baseline[None] + a * delta[None]
        total += input_gradients(ckpt, path, label, dropout_state).sum(axis=0, dtype=np.float64)
    attribution = delta * (total / cfg.steps)
    return SaliencyMap(aggregate(attribution, aggregation), "integrated_gradients", label, aggregation,
                       metadata={"ig_steps": cfg.steps, "ig_baseline": "zeros" if cfg.baseline is None else "custom"})


def explain(method: str, ckpt: Checkpoint, image: ImageLike, label: Optional[int] = None,
            aggregation: str = "raw-sum", ig: Optional[IGConfig] = None,
            dropout_state: DropoutState = INACTIVE) -> SaliencyMap:
    """
    Dispatch by method id

    Args:
        method: gradient | gradient_x_input | integrated_gradients
        label: target class; None uses the deterministic predicted label
    """
    if label is None:
        label = predicted_label(ckpt, image)
    if method == "gradient":
        return gradient(ckpt, image, label, aggregation, dropout_state)
    if method == "gradient_x_input":
        return gradient_x_input(ckpt, image, label, aggregation, dropout_state)
    if method == "integrated_gradients":
        return integrated_gradients(ckpt, image, label, ig, aggregation, dropout_state)
    raise UsageError(f"Unknown attribution method: {method} (expected one of {', '.join(METHODS)})")
