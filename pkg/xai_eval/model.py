"""
Small dropout-equipped CNN classifier: definition, training, evaluation, checkpoints

The default desk architecture is three conv blocks (conv 3x3 "same" → relu →
maxpool 2x2) with 16/32/64 channels, then flatten, dropout and a dense head.
A spec with no conv blocks is a plain linear classifier.
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from xai_eval.data import RunManifest, load_images
from xai_eval.errors import DataError, ShapeError, TrainingDivergedError, UsageError
from xai_eval.report import atomic_write_bytes
from xai_eval.tensor import (
    RngStream, Tensor, Tape, backward, conv2d, cross_entropy, dense, dropout, dropout_mask,
    flatten, maxpool2d, no_grad, relu,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"XAIEVCKP"
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]


class ConvBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: int = Field(ge=1)
    kernel: int = Field(default=3, ge=1)
    pool: int = Field(default=2, ge=1)

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("conv kernel size must be odd (same padding)")
        return v


class ModelSpec(BaseModel):
    """Architecture of the classifier"""

    model_config = ConfigDict(extra="forbid")

    input_shape: Tuple[int, int, int] = (3, 64, 64)
    conv_blocks: List[ConvBlock] = Field(
        default_factory=lambda: [ConvBlock(channels=16), ConvBlock(channels=32), ConvBlock(channels=64)]
    )
    dropout_rate: Optional[float] = 0.5
    num_classes: int

    @field_validator("num_classes")
    @classmethod
    def _enough_classes(cls, v: int) -> int:
        if v < 2:
            raise ValueError("num_classes must be at least 2")
        return v

    @field_validator("dropout_rate")
    @classmethod
    def _rate_range(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        return v

    @model_validator(mode="after")
    def _fits(self) -> "ModelSpec":
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ValueError(f"invalid input shape {self.input_shape}")
        for i, block in enumerate(self.conv_blocks):
            if block.pool > 1:
                h, w = h // block.pool, w // block.pool
            if h < 1 or w < 1:
                raise ValueError(f"conv block {i} pools the feature map below 1x1")
        return self

    @property
    def has_dropout(self) -> bool:
        return self.dropout_rate is not None

    def feature_size(self) -> int:
        c, h, w = self.input_shape
        for block in self.conv_blocks:
            c = block.channels
            if block.pool > 1:
                h, w = h // block.pool, w // block.pool
        return c * h * w

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Weight names and shapes in serialization order"""
        shapes: Dict[str, Tuple[int, ...]] = {}
        c_in = self.input_shape[0]
        for i, block in enumerate(self.conv_blocks):
            shapes[f"conv{i}.weight"] = (block.channels, c_in, block.kernel, block.kernel)
            shapes[f"conv{i}.bias"] = (block.channels,)
            c_in = block.channels
        shapes["head.weight"] = (self.num_classes, self.feature_size())
        shapes["head.bias"] = (self.num_classes,)
        return shapes


class TrainParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-3, gt=0)
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


@dataclass
class DropoutState:
    """
    How the dropout layer behaves in one forward pass

    Inactive by default. When active, either `mask` (a multiplier of shape
    (1, features) shared by every row of the batch) or `rng` must be given.
    `rate` overrides the spec's rate.
    """

    active: bool = False
    rng: Optional[RngStream] = None
    mask: Optional[np.ndarray] = None
    rate: Optional[float] = None


INACTIVE = DropoutState()


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = self.spec.parameter_shapes()
        if list(self.weights) != list(expected):
            raise ShapeError(f"checkpoint weights {list(self.weights)} do not match spec {list(expected)}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ShapeError(f"weight {name} has shape {self.weights[name].shape}, spec needs {shape}")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.weights.values())).dtype

    @property
    def class_names(self) -> List[str]:
        return list(self.metadata.get("class_names") or [str(i) for i in range(self.spec.num_classes)])

    def with_dtype(self, dtype: Any) -> "Checkpoint":
        """Copy with every weight cast (float64 copies serve gradient checks)"""
        return Checkpoint(
            spec=self.spec,
            weights={k: v.astype(dtype) for k, v in self.weights.items()},
            metadata=dict(self.metadata),
        )

    def parameters(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype) for k, v in self.weights.items()}

    def dropout_mask(self, rng: RngStream, rate: Optional[float] = None) -> np.ndarray:
        """One (1, features) dropout multiplier drawn from rng"""
        rate = self.spec.dropout_rate if rate is None else rate
        if rate is None:
            raise UsageError("model has no dropout layer")
        return dropout_mask((1, self.spec.feature_size()), rate, rng, dtype=self.dtype)


def init_weights(spec: ModelSpec, seed: int = 0, dtype: Any = np.float32) -> Dict[str, np.ndarray]:
    """Fan-in scaled uniform weights (one named stream per tensor), zero biases"""
    weights: Dict[str, np.ndarray] = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 3.0 if name.startswith("head") else 6.0
        bound = math.sqrt(gain / fan_in)
        rng = RngStream(seed, f"init/{name}")
        weights[name] = rng.generator.uniform(-bound, bound, size=shape).astype(dtype)
    return weights


def initial_checkpoint(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    return Checkpoint(spec=spec, weights=init_weights(spec, seed), metadata={"epochs": 0, "seed": seed})


def _as_batch(ckpt: Checkpoint, images: Union[Tensor, np.ndarray]) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=ckpt.dtype)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(ckpt.spec.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match model input {ckpt.spec.input_shape}")
    return x


def forward(ckpt: Checkpoint, images: Union[Tensor, np.ndarray], dropout_state: DropoutState = INACTIVE,
            params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Pre-softmax logits, shape (N, classes)

    Args:
        ckpt: model weights and spec
        images: (C, H, W) or (N, C, H, W) in normalised pixel space
        dropout_state: dropout behaviour for this pass (inactive by default)
        params: weight tensors to use instead of the checkpoint's (training)
    """
    spec = ckpt.spec
    p = params if params is not None else ckpt.parameters()
    h = _as_batch(ckpt, images)
    for i, block in enumerate(spec.conv_blocks):
        h = conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding=block.kernel // 2)
        h = relu(h)
        if block.pool > 1:
            h = maxpool2d(h, block.pool)
    h = flatten(h)
    if spec.dropout_rate is not None:
        rate = spec.dropout_rate if dropout_state.rate is None else dropout_state.rate
        h = dropout(h, rate, rng=dropout_state.rng, active=dropout_state.active, mask=dropout_state.mask)
    elif dropout_state.active:
        raise UsageError("model has no dropout layer")
    return dense(h, p["head.weight"], p["head.bias"])


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row softmax in float64"""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_logits(ckpt: Checkpoint, images: Union[Tensor, np.ndarray], batch_size: int = 64,
                   workers: int = 1, dropout_state: DropoutState = INACTIVE) -> np.ndarray:
    x = _as_batch(ckpt, images).data
    starts = list(range(0, len(x), batch_size))

    def _run(start: int) -> np.ndarray:
        with no_grad():
            return forward(ckpt, x[start:start + batch_size], dropout_state).data

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run, starts))
    else:
        parts = [_run(s) for s in starts]
    if not parts:
        return np.zeros((0, ckpt.spec.num_classes), dtype=ckpt.dtype)
    return np.concatenate(parts)


def predict(ckpt: Checkpoint, image: Union[Tensor, np.ndarray], dropout_state: DropoutState = INACTIVE) -> np.ndarray:
    """Class probabilities: (classes,) for one CHW image, (N, classes) for a batch"""
    single = (image.ndim if isinstance(image, Tensor) else np.ndim(image)) == 3
    probs = softmax_probs(predict_logits(ckpt, image, dropout_state=dropout_state))
    return probs[0] if single else probs


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability, ties to the lower index"""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def predict_topk(ckpt: Checkpoint, image: Union[Tensor, np.ndarray], k: int) -> List[int]:
    if not 1 <= k <= ckpt.spec.num_classes:
        raise UsageError(f"k must lie in [1, {ckpt.spec.num_classes}], got {k}")
    probs = predict(ckpt, image)
    if probs.ndim != 1:
        raise ShapeError("predict_topk expects a single image")
    return [int(i) for i in rank_classes(probs)[:k]]


def predicted_label(ckpt: Checkpoint, image: Union[Tensor, np.ndarray]) -> int:
    """Deterministic (dropout inactive) top-1 label"""
    return int(rank_classes(predict(ckpt, image))[0])


class Adam:
    def __init__(self, params: TrainParams):
        self.lr = params.lr
        self.beta1 = params.beta1
        self.beta2 = params.beta2
        self.eps = params.eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)
            p.zero_grad()


def split_stratified(manifest: RunManifest, ratio: float = 2.0 / 3.0, seed: int = 0) -> Tuple[RunManifest, RunManifest]:
    """
    Per-class random split into train/validation

    Each class with n samples contributes floor(n * ratio) (clamped to
    [1, n-1]) training samples. Record order within each side follows the
    input manifest.
    """
    if not 0.0 < ratio < 1.0:
        raise UsageError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    by_class: Dict[int, List[int]] = {}
    for i, rec in enumerate(manifest.records):
        by_class.setdefault(rec.class_index, []).append(i)
    small = [manifest.class_names[c] for c, idx in sorted(by_class.items()) if len(idx) < 2]
    if small:
        raise DataError(f"Classes with fewer than 2 samples cannot be split: {', '.join(small)}")

    train_idx: List[int] = []
    for c, idx in sorted(by_class.items()):
        n = len(idx)
        n_train = min(max(int(math.floor(n * ratio + 1e-9)), 1), n - 1)
        order = RngStream(seed, f"split/{manifest.class_names[c]}").permutation(n)
        train_idx.extend(idx[j] for j in order[:n_train])
    chosen = set(train_idx)
    train = [r for i, r in enumerate(manifest.records) if i in chosen]
    val = [r for i, r in enumerate(manifest.records) if i not in chosen]
    return manifest.with_records(train), manifest.with_records(val)


def _mean_loss(ckpt: Checkpoint, x: np.ndarray, y: np.ndarray, batch_size: int) -> Tuple[Optional[float], Optional[float]]:
    if len(x) == 0:
        return None, None
    logits = predict_logits(ckpt, x, batch_size=batch_size)
    probs = softmax_probs(logits)
    nll = -np.log(np.maximum(probs[np.arange(len(y)), y], np.finfo(np.float64).tiny))
    accuracy = float(np.mean(rank_classes(probs)[:, 0] == y))
    return math.fsum(nll) / len(y), accuracy


def train_arrays(spec: ModelSpec, x_train: np.ndarray, y_train: np.ndarray,
                 x_val: Optional[np.ndarray] = None, y_val: Optional[np.ndarray] = None,
                 params: Optional[TrainParams] = None, show_progress: bool = False,
                 metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """
    Minibatch Adam on cross entropy over in-memory arrays

    Shuffling and dropout masks come from named streams of params.seed, so
    the same seed gives bit-identical weights.

    Raises:
        TrainingDivergedError: the loss became non-finite
    """
    params = params or TrainParams()
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(x_train) == 0:
        raise DataError("training set is empty")
    if y_train.min() < 0 or y_train.max() >= spec.num_classes:
        raise DataError(f"training labels outside [0, {spec.num_classes})")
    if x_val is None or y_val is None:
        x_val = np.zeros((0,) + tuple(spec.input_shape), dtype=np.float32)
        y_val = np.zeros((0,), dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)

    ckpt = initial_checkpoint(spec, params.seed)
    weights = ckpt.parameters(requires_grad=True)
    optimizer = Adam(params)
    history: List[Dict[str, Any]] = []
    n = len(x_train)

    for epoch in tqdm(range(params.epochs), desc="train", disable=not show_progress):
        order = RngStream(params.seed, f"train/shuffle/{epoch}").permutation(n)
        dropout_streams = RngStream(params.seed, f"train/dropout/{epoch}")
        losses: List[float] = []
        for b, start in enumerate(range(0, n, params.batch_size)):
            idx = order[start:start + params.batch_size]
            state = DropoutState(active=True, rng=dropout_streams.child(b))
            with Tape():
                logits = forward(ckpt, x_train[idx], state, params=weights)
                loss = cross_entropy(logits, y_train[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, value)
                backward(loss)
            optimizer.step(weights)
            losses.append(value * len(idx))
        ckpt.weights = {k: t.data for k, t in weights.items()}
        train_loss = math.fsum(losses) / n
        val_loss, val_acc = _mean_loss(ckpt, x_val, y_val, params.batch_size)
        if val_loss is not None and not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch, val_loss)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_accuracy": val_acc})
        logger.info(f"Epoch {epoch + 1}/{params.epochs}: train_loss={train_loss:.4f} "
                    f"val_loss={val_loss if val_loss is None else round(val_loss, 4)} val_acc={val_acc}")

    ckpt.metadata = {
        **(metadata or {}),
        "epochs": params.epochs,
        "seed": params.seed,
        "train_params": params.model_dump(),
        "history": history,
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "final_val_loss": history[-1]["val_loss"] if history else None,
    }
    return ckpt


def train(spec: ModelSpec, train_set: RunManifest, val_set: Optional[RunManifest] = None,
          params: Optional[TrainParams] = None, workers: int = 1, show_progress: bool = False) -> Checkpoint:
    """Load the manifests' images and train; class names are stored in the checkpoint"""
    if train_set.num_classes != spec.num_classes:
        raise UsageError(f"manifest has {train_set.num_classes} classes, model spec {spec.num_classes}")
    x_train, y_train = load_images(train_set, workers=workers)
    x_val, y_val = load_images(val_set, workers=workers) if val_set is not None else (None, None)
    logger.info(f"Training on {len(x_train)} images, validating on {0 if x_val is None else len(x_val)}")
    return train_arrays(spec, x_train, y_train, x_val, y_val, params, show_progress=show_progress,
                        metadata={"class_names": list(train_set.class_names)})


@dataclass
class EvaluationReport:
    topk: Dict[int, float]
    confusion: np.ndarray
    class_names: List[str]
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "topk_accuracy": {f"top{k}": v for k, v in self.topk.items()},
            "class_names": self.class_names,
            "confusion": self.confusion.tolist(),
        }


def evaluate_predictions(probs: np.ndarray, labels: Sequence[int], ks: Sequence[int] = (1, 3),
                         class_names: Optional[Sequence[str]] = None) -> EvaluationReport:
    """
    Top-k accuracies and the confusion matrix of top-1 predictions

    k larger than the number of classes is clamped (accuracy 1.0).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ShapeError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty set")
    num_classes = probs.shape[1]
    ranks = rank_classes(probs)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, ranks[:, 0]), 1)
    topk: Dict[int, float] = {}
    for k in ks:
        if k < 1:
            raise UsageError(f"k must be positive, got {k}")
        hits = (ranks[:, :min(k, num_classes)] == labels[:, None]).any(axis=1)
        topk[int(k)] = float(hits.mean())
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return EvaluationReport(topk=topk, confusion=confusion, class_names=names, n=len(labels))


def evaluate(ckpt: Checkpoint, manifest: RunManifest, ks: Sequence[int] = (1, 3), workers: int = 1) -> EvaluationReport:
    if len(manifest) == 0:
        raise DataError("cannot evaluate on an empty manifest")
    images, labels = load_images(manifest, workers=workers)
    probs = softmax_probs(predict_logits(ckpt, images, workers=workers))
    report = evaluate_predictions(probs, labels, ks, class_names=manifest.class_names)
    logger.info(f"Evaluated {report.n} images: " + ", ".join(f"top{k}={v:.3f}" for k, v in report.topk.items()))
    return report


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    """
    Binary checkpoint: magic, u32 version, u32 header length, JSON header,
    then little-endian float32 buffers in the header's tensor order
    """
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in ckpt.weights.items()]
    header = json.dumps(
        {"spec": ckpt.spec.model_dump(), "metadata": ckpt.metadata, "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.extend(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in ckpt.weights.values())
    out = atomic_write_bytes(path, b"".join(chunks))
    logger.info(f"Saved checkpoint to {out}")
    return out


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    prefix = len(CHECKPOINT_MAGIC)
    if blob[:prefix] != CHECKPOINT_MAGIC or len(blob) < prefix + 8:
        raise DataError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack_from("<II", blob, prefix)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = prefix + 8
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        spec = ModelSpec.model_validate(header["spec"])
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from None
    offset += header_len

    weights: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise DataError(f"{path}: truncated weight buffer for {entry['name']}")
        weights[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after weights")
    try:
        return Checkpoint(spec=spec, weights=weights, metadata=header.get("metadata", {}))
    except ShapeError as e:
        raise DataError(f"{path}: {e}") from None
