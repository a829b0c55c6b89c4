import threading

import numpy as np
import pytest

from xai_eval.errors import ComputationError, ShapeError, UsageError
from xai_eval.model import ModelSpec, forward, initial_checkpoint
from xai_eval.tensor import (
    RngStream, Tape, Tensor, backward, conv2d, cross_entropy, dense, dropout, dropout_mask, gradcheck,
    matmul, maxpool2d, no_grad, pick, relu, softmax,
)


def test_broadcast_add_mul_gradients():
    """Broadcast operands receive gradients summed over the broadcast axes"""
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((a * b + b).sum())
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_allclose(b.grad, np.array([3.0, 5.0, 7.0]) + 2.0)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_backward_on_detached_tensor():
    with pytest.raises(ComputationError):
        backward(Tensor(np.ones(())))


def test_backward_needs_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_explicit_tape_records_and_resets():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = relu(x * 3.0).sum()
        assert len(tape) == 3
        backward(y)
        assert len(tape) == 0
    np.testing.assert_allclose(x.grad, np.full((2, 2), 3.0))


def test_no_grad_suspends_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_item_needs_single_element():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).item()


def test_unused_implicit_graph_is_released_by_no_grad():
    with no_grad():
        pass
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    tape = y._tape
    assert tape is not None and tape.implicit and len(tape) == 2
    with no_grad():
        pass
    assert len(tape) == 0
    assert y._tape is None
    z = (x * 3.0).sum()
    assert z._tape is not tape
    backward(z)
    np.testing.assert_allclose(x.grad, np.full(3, 3.0))


def test_tapes_are_private_per_thread():
    """Concurrent backward passes in different threads do not interfere"""
    results = {}

    def work(scale: float) -> None:
        x = Tensor(np.ones(4), requires_grad=True)
        for _ in range(50):
            x.zero_grad()
            backward((x * scale).sum())
        results[scale] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(float(s),)) for s in (2, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    np.testing.assert_array_equal(results[2.0], np.full(4, 2.0))
    np.testing.assert_array_equal(results[5.0], np.full(4, 5.0))


def test_conv2d_known_values():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w)
    np.testing.assert_allclose(out.data[0, 0], [[8.0, 12.0], [20.0, 24.0]])


def test_conv2d_same_padding_keeps_size():
    x = Tensor(np.ones((2, 3, 5, 5)))
    w = Tensor(np.ones((4, 3, 3, 3)))
    assert conv2d(x, w, Tensor(np.zeros(4)), padding=1).shape == (2, 4, 5, 5)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_maxpool_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[[1.0, 1.0], [0.0, 1.0]]]]), requires_grad=True)
    backward(maxpool2d(x, 2).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_softmax_rows_sum_to_one():
    s = softmax(Tensor(np.random.default_rng(0).normal(size=(5, 7)) * 30))
    np.testing.assert_allclose(s.data.sum(axis=1), np.ones(5), atol=1e-6)


def test_cross_entropy_matches_manual_value():
    logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
    labels = np.array([0, 2])
    expected = np.mean([
        -np.log(np.exp(2.0) / np.exp([2.0, 0.0, -1.0]).sum()),
        np.log(3.0),
    ])
    loss = cross_entropy(Tensor(logits, dtype=np.float64), labels)
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)


def test_pick_and_dense_gradients():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    b = Tensor(np.zeros(2))
    backward(pick(dense(x, w, b), 1).sum())
    np.testing.assert_allclose(x.grad, np.array([[4.0, 5.0, 6.0], [4.0, 5.0, 6.0]]))


def test_rng_stream_is_deterministic_and_named():
    a = RngStream(7, "mcd").random((4,))
    b = RngStream(7, "mcd").random((4,))
    c = RngStream(7, "other").random((4,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(RngStream(7, "mcd").child(0).random((4,)), RngStream(7, "mcd").child(1).random((4,)))
    child = RngStream(7, "pf/random").child(3)
    np.testing.assert_array_equal(child.random((4,)), RngStream(7, "pf/random/3").random((4,)))


def test_dropout_rate_zero_and_inactive_are_identity():
    x = Tensor(np.ones((2, 5)))
    assert dropout(x, 0.0, RngStream(0)) is x
    assert dropout(x, 0.5, RngStream(0), active=False) is x


def test_dropout_mask_is_inverted():
    mask = dropout_mask((400, 250), 0.5, RngStream(1))
    assert np.isin(mask, [0.0, 2.0]).all()
    assert abs(np.count_nonzero(mask) / mask.size - 0.5) <= 0.01
    out = dropout(Tensor(np.ones((400, 250))), 0.5, mask=mask)
    assert abs(out.data.mean() - 1.0) <= 0.01


def test_dropout_shared_mask_broadcasts_over_batch():
    x = Tensor(np.ones((3, 6)))
    mask = dropout_mask((1, 6), 0.5, RngStream(2))
    out = dropout(x, 0.5, mask=mask)
    for row in out.data:
        np.testing.assert_array_equal(row, mask[0])


def test_dropout_rate_out_of_range():
    with pytest.raises(UsageError):
        dropout(Tensor(np.ones(3)), 1.0, RngStream(0))
    with pytest.raises(UsageError):
        dropout(Tensor(np.ones(3)), 0.5)


def test_gradcheck_on_smooth_function():
    result = gradcheck(lambda x: (x * x * x).sum(), [np.linspace(0.5, 2.0, 7)])
    assert result.checked == 7
    assert result.max_rel_error < 1e-5


def test_gradcheck_desk_architecture():
    """Input and kernel gradients of the default architecture match central differences"""
    spec = ModelSpec(input_shape=(3, 16, 16), num_classes=3)
    ckpt = initial_checkpoint(spec, seed=1).with_dtype(np.float64)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 16, 16))
    labels = np.array([0, 2])

    def loss(images, kernel):
        params = {**ckpt.parameters(), "conv0.weight": kernel}
        return cross_entropy(forward(ckpt, images, params=params), labels)

    result = gradcheck(loss, [x, ckpt.weights["conv0.weight"]], max_elements=40)
    assert result.checked > 40
    assert result.max_rel_error <= 1e-3


def test_input_gradients_match_finite_differences_on_random_inputs():
    """Analytic input gradients of a random desk CNN for 20 inputs"""
    spec = ModelSpec(input_shape=(3, 16, 16), num_classes=3)
    ckpt = initial_checkpoint(spec, seed=4).with_dtype(np.float64)
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(20):
        x = rng.normal(size=(1, 3, 16, 16))
        label = i % 3
        result = gradcheck(lambda images: pick(forward(ckpt, images), label).sum(), [x], max_elements=10, seed=i)
        worst = max(worst, result.max_rel_error)
    assert worst <= 1e-3
