import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pytest

from xai_eval.data import SyntheticSpec, generate_synthetic, load_images
from xai_eval.model import Checkpoint, ConvBlock, ModelSpec, TrainParams, init_weights, train


def write_manifest(root: Path, counts: Dict[str, int], merge_map: Optional[Dict[str, str]] = None,
                   split: Optional[str] = None) -> Path:
    """Manifest JSON with `counts[name]` records per class (files are not created)"""
    records = [
        {"image": f"img/{name}_{i}.png", "label": name, "split": split}
        for name, n in counts.items()
        for i in range(n)
    ]
    path = root / "manifest.json"
    path.write_text(json.dumps({"records": records, "merge_map": merge_map or {}, "image_size": [8, 8]}))
    return path


def linear_checkpoint(weights: np.ndarray, bias: Optional[np.ndarray] = None, input_shape=(3, 4, 4),
                      dropout_rate: Optional[float] = None) -> Checkpoint:
    """Pure linear classifier with the given (classes, features) weights"""
    weights = np.asarray(weights, dtype=np.float32)
    spec = ModelSpec(input_shape=input_shape, conv_blocks=[], num_classes=weights.shape[0],
                     dropout_rate=dropout_rate)
    if bias is None:
        bias = np.zeros(weights.shape[0], dtype=np.float32)
    return Checkpoint(spec=spec, weights={"head.weight": weights, "head.bias": np.asarray(bias, dtype=np.float32)})


@pytest.fixture
def tiny_ckpt() -> Checkpoint:
    """Randomly initialised one-block CNN with dropout, 3 classes, 8x8 input"""
    spec = ModelSpec(input_shape=(3, 8, 8), conv_blocks=[ConvBlock(channels=4)], num_classes=3, dropout_rate=0.5)
    weights = init_weights(spec, seed=3)
    rng = np.random.default_rng(11)
    for name in weights:
        if name.endswith(".bias"):
            weights[name] = rng.normal(0, 0.1, weights[name].shape).astype(np.float32)
    return Checkpoint(spec=spec, weights=weights)


@pytest.fixture
def tiny_images() -> np.ndarray:
    return np.random.default_rng(5).normal(size=(6, 3, 8, 8)).astype(np.float32)


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Default synthetic set: 3 classes, 100/30/30 images per class, 64x64"""
    return generate_synthetic(SyntheticSpec(seed=0), tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def trained_ckpt(synthetic_dataset) -> Checkpoint:
    manifest = synthetic_dataset.manifest
    spec = ModelSpec(input_shape=(3, 64, 64), num_classes=manifest.num_classes)
    return train(spec, manifest.subset("train"), manifest.subset("val"), TrainParams(epochs=20, seed=0))


@pytest.fixture(scope="session")
def test_set(synthetic_dataset):
    """(manifest, images, labels) of the synthetic test split"""
    manifest = synthetic_dataset.manifest.subset("test")
    images, labels = load_images(manifest)
    return manifest, images, labels
