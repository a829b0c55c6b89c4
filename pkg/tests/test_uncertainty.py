import json

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import linear_checkpoint
from xai_eval.attribution import IGConfig, explain
from xai_eval.errors import ComputationError, ShapeError, UsageError
from xai_eval.model import forward, predict, predicted_label, softmax_probs
from xai_eval.tensor import no_grad
from xai_eval.uncertainty import (
    MCDConfig, PredictiveDistribution, SaliencyStack, mcd_predict, mcd_saliency_stack, quantile_map, quantile_maps,
    sample_state,
)


def test_rate_zero_rows_equal_deterministic_prediction(tiny_ckpt, tiny_images):
    dist = mcd_predict(tiny_ckpt, tiny_images[0], MCDConfig(samples=5, dropout_rate=0.0))
    expected = predict(tiny_ckpt, tiny_images[0])
    for row in dist.probs:
        np.testing.assert_array_equal(row, expected)


def test_single_sample_is_reproducible(tiny_ckpt, tiny_images):
    cfg = MCDConfig(samples=1, seed=42)
    first = mcd_predict(tiny_ckpt, tiny_images[1], cfg)
    second = mcd_predict(tiny_ckpt, tiny_images[1], cfg)
    np.testing.assert_array_equal(first.probs, second.probs)
    with no_grad():
        logits = forward(tiny_ckpt, tiny_images[1][None], sample_state(tiny_ckpt, cfg, 0)).data
    np.testing.assert_array_equal(first.probs[0], softmax_probs(logits)[0])


def test_rows_are_normalised_and_vary(tiny_ckpt, tiny_images):
    dist = mcd_predict(tiny_ckpt, tiny_images[2], MCDConfig(samples=30))
    assert dist.probs.shape == (30, 3)
    np.testing.assert_allclose(dist.probs.sum(axis=1), np.ones(30), atol=1e-6)
    assert dist.std().max() > 0


def test_single_sample_reproduces_row_of_full_run(tiny_ckpt, tiny_images):
    full = mcd_predict(tiny_ckpt, tiny_images[3], MCDConfig(samples=6, seed=10))
    alone = mcd_predict(tiny_ckpt, tiny_images[3], MCDConfig(samples=1, seed=13))
    np.testing.assert_array_equal(full.probs[3], alone.probs[0])


def test_workers_do_not_change_samples(tiny_ckpt, tiny_images):
    serial = mcd_predict(tiny_ckpt, tiny_images[4], MCDConfig(samples=8, seed=1))
    parallel = mcd_predict(tiny_ckpt, tiny_images[4], MCDConfig(samples=8, seed=1, workers=3))
    np.testing.assert_array_equal(serial.probs, parallel.probs)


def test_model_without_dropout_is_rejected():
    ckpt = linear_checkpoint(np.ones((2, 48)))
    with pytest.raises(UsageError):
        mcd_predict(ckpt, np.zeros((3, 4, 4), dtype=np.float32), MCDConfig(samples=2))


def test_mcd_config_validation():
    with pytest.raises(ValidationError):
        MCDConfig(samples=0)
    with pytest.raises(ValidationError):
        MCDConfig(dropout_rate=1.0)


def test_distribution_rejects_unnormalised_rows():
    with pytest.raises(ComputationError):
        PredictiveDistribution(np.array([[0.5, 0.6]]))


def test_distribution_summary_and_histogram():
    probs = np.array([[0.1, 0.9], [0.3, 0.7], [0.5, 0.5], [0.7, 0.3], [0.9, 0.1]])
    dist = PredictiveDistribution(probs, seed=3)
    summary = dist.summary(0)
    assert summary["samples"] == 5
    assert summary["mean"] == pytest.approx(0.5)
    assert summary["q0.5"] == pytest.approx(0.5)
    assert summary["q0.25"] == pytest.approx(0.3)
    assert (summary["min"], summary["max"]) == (0.1, 0.9)
    counts, edges = dist.histogram(1)
    assert counts.sum() == 5
    assert len(edges) == 21 and edges[0] == 0.0 and edges[-1] == 1.0


def test_rate_zero_stack_equals_deterministic_map(tiny_ckpt, tiny_images):
    image = tiny_images[0]
    cfg = MCDConfig(samples=3, dropout_rate=0.0)
    for method in ("gradient", "integrated_gradients"):
        stack = mcd_saliency_stack(tiny_ckpt, image, 1, method, cfg, ig=IGConfig(steps=4))
        expected = explain(method, tiny_ckpt, image, 1, ig=IGConfig(steps=4)).values
        for values in stack.values:
            np.testing.assert_array_equal(values, expected)


def test_rate_zero_quantile_maps_equal_deterministic_map(tiny_ckpt, tiny_images):
    image = tiny_images[3]
    cfg = MCDConfig(samples=100, dropout_rate=0.0, seed=11)
    for method in ("gradient", "gradient_x_input"):
        stack = mcd_saliency_stack(tiny_ckpt, image, None, method, cfg)
        expected = explain(method, tiny_ckpt, image).values
        for qmap in quantile_maps(stack, [0.25, 0.5, 0.75]):
            np.testing.assert_array_equal(qmap.values, expected)


def test_stack_shape_and_determinism(tiny_ckpt, tiny_images):
    cfg = MCDConfig(samples=5, seed=7)
    first = mcd_saliency_stack(tiny_ckpt, tiny_images[1], None, "gradient_x_input", cfg)
    second = mcd_saliency_stack(tiny_ckpt, tiny_images[1], None, "gradient_x_input",
                                cfg.model_copy(update={"workers": 2}))
    assert first.values.shape == (5, 8, 8)
    assert first.label == predicted_label(tiny_ckpt, tiny_images[1])
    np.testing.assert_array_equal(first.values, second.values)
    assert not np.array_equal(first.values[0], first.values[1])


def test_stack_sample_uses_its_own_mask(tiny_ckpt, tiny_images):
    """Map t equals an explanation under the mask of seed base + t"""
    cfg = MCDConfig(samples=3, seed=20)
    stack = mcd_saliency_stack(tiny_ckpt, tiny_images[2], 0, "gradient", cfg)
    expected = explain("gradient", tiny_ckpt, tiny_images[2], 0, dropout_state=sample_state(tiny_ckpt, cfg, 2))
    np.testing.assert_array_equal(stack.values[2], expected.values)
    maps = stack.maps()
    assert maps[2].metadata["seed_lineage"] == {"mcd_seed": 22, "sample": 2}


def test_stack_save_writes_index(tmp_path):
    stack = SaliencyStack(values=np.zeros((3, 2, 2)), method="gradient", label=1, aggregation="absolute", seed=5)
    path = stack.save(tmp_path / "stack.f32")
    side = json.loads(path.with_suffix(".json").read_text())
    assert side["shape"] == [3, 2, 2]
    assert side["index"][2] == {"sample": 2, "seed": 7}


def test_quantile_of_identical_maps():
    base = np.random.default_rng(0).normal(size=(4, 5))
    stack = np.stack([base] * 6)
    for q in (0.0, 0.3, 0.5, 1.0):
        np.testing.assert_allclose(quantile_map(stack, q).values, base, rtol=0, atol=0)


def test_quantile_extremes():
    stack = np.random.default_rng(1).normal(size=(9, 3, 4))
    np.testing.assert_array_equal(quantile_map(stack, 0.0).values, stack.min(axis=0))
    np.testing.assert_array_equal(quantile_map(stack, 1.0).values, stack.max(axis=0))


def test_median_matches_sort_oracle():
    stack = np.random.default_rng(2).normal(size=(7, 6, 6))
    np.testing.assert_allclose(quantile_map(stack, 0.5).values, np.median(stack, axis=0), atol=1e-6)


def test_linear_quantile_matches_numpy():
    stack = np.random.default_rng(3).normal(size=(10, 4, 4))
    for q in (0.1, 0.25, 0.75, 0.9):
        np.testing.assert_allclose(quantile_map(stack, q).values, np.quantile(stack, q, axis=0), atol=1e-12)


def test_quantile_maps_are_monotone_in_q():
    rng = np.random.default_rng(4)
    qs = np.linspace(0, 1, 21)
    for _ in range(100):
        samples = int(rng.integers(1, 40))
        stack = rng.normal(size=(samples, 8, 8)).astype(np.float32)
        maps = quantile_maps(stack, qs)
        for lower, upper in zip(maps, maps[1:]):
            assert (lower.values <= upper.values).all()


def test_nearest_rank_quantile():
    stack = np.arange(1.0, 5.0)[:, None, None] * np.ones((4, 2, 2))
    assert quantile_map(stack, 0.5, method="nearest").values[0, 0] == 2.0
    assert quantile_map(stack, 0.0, method="nearest").values[0, 0] == 1.0
    assert quantile_map(stack, 0.51, method="nearest").values[0, 0] == 3.0


def test_quantile_map_carries_stack_metadata():
    stack = SaliencyStack(values=np.ones((2, 3, 3)), method="gradient", label=2, aggregation="absolute")
    qmap = quantile_map(stack, 0.25)
    assert (qmap.method, qmap.label, qmap.samples, qmap.q) == ("gradient", 2, 2, 0.25)
    saliency = qmap.to_saliency_map()
    assert saliency.metadata["quantile"] == 0.25
    assert saliency.aggregation == "absolute"


def test_quantile_errors():
    with pytest.raises(UsageError):
        quantile_map(np.zeros((2, 2, 2)), 1.5)
    with pytest.raises(UsageError):
        quantile_map(np.zeros((0, 2, 2)), 0.5)
    with pytest.raises(ShapeError):
        quantile_map(np.zeros((2, 2)), 0.5)
    with pytest.raises(UsageError):
        quantile_map(np.zeros((2, 2, 2)), 0.5, method="midpoint")


@pytest.mark.slow
def test_large_runs_are_self_consistent(trained_ckpt, test_set):
    """Two independent 500-sample runs agree within 3 standard errors per class"""
    _, images, _ = test_set
    first = mcd_predict(trained_ckpt, images[0], MCDConfig(samples=500, seed=0))
    second = mcd_predict(trained_ckpt, images[0], MCDConfig(samples=500, seed=500))
    se = np.sqrt(first.std() ** 2 / 500 + second.std() ** 2 / 500)
    assert (np.abs(first.mean() - second.mean()) <= 3 * se + 1e-9).all()
