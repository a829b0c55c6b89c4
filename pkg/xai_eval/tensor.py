"""
Dense tensors with reverse-mode automatic differentiation

Just enough machinery for a small CNN and for input gradients:
elementwise arithmetic, matmul, conv2d, maxpool2d, relu, flatten, dense,
softmax, cross entropy and (inverted) dropout. Operations are recorded on a
Tape, replayed backwards by `backward`.
"""

import contextlib
import logging
import zlib
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from xai_eval.errors import ComputationError, ShapeError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("xai_eval_active_tape", default=None)
_grad_enabled: ContextVar[bool] = ContextVar("xai_eval_grad_enabled", default=True)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class RngStream:
    """
    Named, counter-based random stream (Philox)

    Two streams with the same (seed, name) produce identical draws; `child(i)`
    is the stream named "<name>/<i>", so item i (a training batch, a random
    map or ranking) can be recomputed in isolation.
    """

    def __init__(self, seed: int, name: str = "default"):
        self.seed = int(seed)
        self.name = name
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{int(index)}")

    def random(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r})"


class Tensor:
    """
    n-dimensional float array that can take part in a gradient tape

    Args:
        data: array-like values (stored row-major, float32 unless a float64
              array or dtype is given)
        requires_grad: whether backward should populate `grad`
        dtype: explicit storage dtype
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[Any] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def flatten(self) -> "Tensor":
        return flatten(self)

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(_lift(other, self), self)

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, _lift(-1.0, self))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), requires_grad=False)


@dataclass
class TapeRecord:
    fn: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


@dataclass
class Tape:
    """
    Ordered record of operations for one forward pass

    Records are appended as operations execute, so every record's inputs were
    produced by earlier records (or are leaves). Usable as a context manager
    to make the tape explicit; otherwise an implicit tape is opened for the
    current execution context on first use.
    """

    records: List[TapeRecord] = field(default_factory=list)
    implicit: bool = False
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        output._tape = self
        self.records.append(TapeRecord(fn, inputs, output))

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise ComputationError("backward: loss was not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: Dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            input_grads = rec.fn.backward(g)
            for tensor, g_in in zip(rec.inputs, input_grads):
                if g_in is None or not tensor.requires_grad:
                    continue
                g_in = np.asarray(g_in, dtype=tensor.dtype)
                if g_in.shape != tensor.shape:
                    raise ShapeError(
                        f"{rec.fn.name} backward: gradient shape {g_in.shape} != operand shape {tensor.shape}"
                    )
                key = id(tensor)
                grads[key] = grads[key] + g_in if key in grads else g_in
                touched[key] = tensor

        for key, tensor in touched.items():
            g = grads[key]
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self.reset()

    def reset(self) -> None:
        for rec in self.records:
            rec.output._tape = None
        self.records.clear()
        if self.implicit and _active_tape.get() is self:
            _active_tape.set(None)


def _tape_for(tensors: Sequence[Tensor]) -> Tape:
    tapes = {id(t._tape): t._tape for t in tensors if t._tape is not None}
    if len(tapes) > 1:
        raise ComputationError("operands were recorded on different tapes")
    if tapes:
        return next(iter(tapes.values()))
    tape = _active_tape.get()
    if tape is None:
        tape = Tape(implicit=True)
        _active_tape.set(tape)
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Suspend tape recording in the current context

    An implicit tape still pending on exit is discarded, so records of a
    graph that never reached backward() are freed.
    """
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)
        pending = _active_tape.get()
        if pending is not None and pending.implicit:
            pending.reset()



def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad tensor the scalar loss depends on"""
    if not loss.requires_grad or loss._tape is None:
        raise ComputationError("backward called on a detached tensor (not on any tape)")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss._tape.backward(loss)


class Function:
    """Base class for differentiable operations: forward on arrays, backward on output grads"""

    name = "op"

    def __init__(self) -> None:
        self.saved: Dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled.get() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad, dtype=out.dtype)
        if requires_grad:
            _tape_for(tensors).record(fn, tuple(tensors), result)
        return result

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so grad matches to_shape"""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, size in enumerate(to_shape):
            if size == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(self.name, a, b)
        self.saved = {"a_shape": a.shape, "b_shape": b.shape}
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (self.unbroadcast(grad, self.saved["a_shape"]),
                self.unbroadcast(grad, self.saved["b_shape"]))


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(self.name, a, b)
        self.saved = {"a_shape": a.shape, "b_shape": b.shape}
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (self.unbroadcast(grad, self.saved["a_shape"]),
                self.unbroadcast(-grad, self.saved["b_shape"]))


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape(self.name, a, b)
        self.saved = {"a": a, "b": b}
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return self.unbroadcast(grad * b, a.shape), self.unbroadcast(grad * a, b.shape)


class MatMul(Function):
    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        self.saved = {"a": a, "b": b}
        return a @ b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return grad @ b.T, a.T @ grad


class Linear(Function):
    """y = x @ W.T + b"""

    name = "dense"

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(
                f"dense: input shape {x.shape} incompatible with weight {w.shape} / bias {b.shape}"
            )
        self.saved = {"x": x, "w": w}
        return x @ w.T + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x, w = self.saved["x"], self.saved["w"]
        return grad @ w, grad.T @ x, grad.sum(axis=0)


class Conv2d(Function):
    """Cross-correlation of NCHW input with (out, in, kh, kw) kernels, no bias"""

    name = "conv2d"

    def forward(self, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        h_out = (xp.shape[2] - kh) // stride + 1
        w_out = (xp.shape[3] - kw) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        self.saved = {"xp_shape": xp.shape, "windows": windows, "w": w,
                      "stride": stride, "padding": padding, "out_hw": (h_out, w_out)}
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        windows, w = self.saved["windows"], self.saved["w"]
        stride, padding = self.saved["stride"], self.saved["padding"]
        h_out, w_out = self.saved["out_hw"]
        kh, kw = w.shape[2], w.shape[3]

        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        grad_xp = np.zeros(self.saved["xp_shape"], dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))  # N, Ho, Wo, C
                grad_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        if padding:
            grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
        return grad_xp, grad_w.astype(w.dtype, copy=False)


class MaxPool2d(Function):
    name = "maxpool2d"

    def forward(self, x: np.ndarray, size: int = 2, stride: Optional[int] = None) -> np.ndarray:
        stride = stride or size
        if x.ndim != 4 or x.shape[2] < size or x.shape[3] < size:
            raise ShapeError(f"maxpool2d: input shape {x.shape} too small for window {size}")
        n, c, h, w = x.shape
        h_out = (h - size) // stride + 1
        w_out = (w - size) // stride + 1
        windows = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
        flat = windows.reshape(n, c, h_out, w_out, size * size)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self.saved = {"x_shape": x.shape, "arg": arg, "size": size, "stride": stride}
        return out

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        arg, size, stride = self.saved["arg"], self.saved["size"], self.saved["stride"]
        n, c, h_out, w_out = grad.shape
        rows = np.arange(h_out)[None, None, :, None] * stride + arg // size
        cols = np.arange(w_out)[None, None, None, :] * stride + arg % size
        n_idx = np.arange(n)[:, None, None, None]
        c_idx = np.arange(c)[None, :, None, None]
        grad_x = np.zeros(self.saved["x_shape"], dtype=grad.dtype)
        if stride >= size:
            grad_x[n_idx, c_idx, rows, cols] = grad
        else:
            np.add.at(grad_x, (np.broadcast_to(n_idx, grad.shape), np.broadcast_to(c_idx, grad.shape),
                               rows, cols), grad)
        return (grad_x,)


class ReLU(Function):
    name = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved = {"positive": x > 0}
        return np.where(x > 0, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * self.saved["positive"],)


class Reshape(Function):
    name = "reshape"

    def forward(self, x: np.ndarray, shape: Tuple[int, ...] = (-1,)) -> np.ndarray:
        self.saved = {"shape": x.shape}
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.saved["shape"]),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        self.saved = {"s": s, "axis": axis}
        return s

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        s, axis = self.saved["s"], self.saved["axis"]
        return (s * (grad - (grad * s).sum(axis=axis, keepdims=True)),)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)"""

    name = "cross_entropy"

    def forward(self, logits: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        nll = log_norm - z[np.arange(len(labels)), labels]
        probs = np.exp(z - log_norm[:, None])
        self.saved = {"probs": probs, "labels": labels, "dtype": logits.dtype}
        return np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        probs, labels = self.saved["probs"], self.saved["labels"]
        g = probs.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        g *= float(grad) / len(labels)
        return (g.astype(self.saved["dtype"]),)


class Sum(Function):
    name = "sum"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.saved = {"shape": x.shape}
        return np.asarray(x.sum(dtype=np.float64), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(grad, self.saved["shape"]).copy(),)


class Pick(Function):
    """Select one column per row: out[i] = x[i, index[i]]"""

    name = "pick"

    def forward(self, x: np.ndarray, index: Any = 0) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"pick: expected 2-D input, got {x.shape}")
        idx = np.broadcast_to(np.asarray(index, dtype=np.int64), (x.shape[0],))
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
            raise ShapeError(f"pick: index outside [0, {x.shape[1]})")
        self.saved = {"shape": x.shape, "idx": idx}
        return x[np.arange(x.shape[0]), idx]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        g = np.zeros(self.saved["shape"], dtype=grad.dtype)
        g[np.arange(len(grad)), self.saved["idx"]] = grad
        return (g,)


def as_tensor(value: Union[Tensor, ArrayLike], dtype: Optional[Any] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    return a + b


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    return a - b


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    return a * b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    out = Conv2d.apply(x, weight, stride=stride, padding=padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {weight.shape}")
        out = out + Reshape.apply(bias, shape=(1, -1, 1, 1))
    return out


def maxpool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    return MaxPool2d.apply(x, size=size, stride=stride)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def flatten(x: Tensor) -> Tensor:
    """Keep the batch axis, collapse the rest"""
    return Reshape.apply(x, shape=(x.shape[0], -1))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    return CrossEntropy.apply(logits, labels=np.asarray(labels))


def pick(x: Tensor, index: Any) -> Tensor:
    return Pick.apply(x, index=index)


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: RngStream, dtype: Any = DEFAULT_DTYPE) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability rate, 1/(1-rate) otherwise"""
    _check_rate(rate)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def dropout(x: Tensor, rate: float, rng: Optional[RngStream] = None, active: bool = True,
            mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Inverted dropout

    Args:
        x: input tensor
        rate: drop probability in [0, 1)
        rng: stream used to draw the mask (required when active and no mask given)
        active: identity when False
        mask: precomputed multiplier broadcastable to x (shares one mask across
              a batch, e.g. all IG path steps of one MCD sample)
    """
    _check_rate(rate)
    if not active or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise UsageError("dropout: an RngStream is required when dropout is active")
        mask = dropout_mask(x.shape, rate, rng, dtype=x.dtype)
    return x * Tensor(np.asarray(mask, dtype=x.dtype))


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: int


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              max_elements: Optional[int] = None, seed: int = 0, atol: float = 1e-6) -> GradCheckResult:
    """
    Compare analytic gradients of a scalar function against central differences

    Everything runs in float64. Elements whose difference quotient changes
    between h and h/2 straddle a kink of relu/maxpool and are excluded.

    Args:
        fn: maps Tensors (one per input) to a scalar Tensor
        inputs: arrays to differentiate with respect to
        h: finite-difference step
        max_elements: check a random subset of this many elements per input
        seed: seed of the subset selection
        atol: floor of the relative-error denominator
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape():
        out = fn(*leaves)
        backward(out)
    analytic = [leaf.grad for leaf in leaves]

    def evaluate(values: List[np.ndarray]) -> float:
        with no_grad():
            return float(fn(*[Tensor(v, dtype=np.float64) for v in values]).data)

    rng = RngStream(seed, "gradcheck")
    worst, checked, excluded = 0.0, 0, 0
    for k, base in enumerate(arrays):
        indices = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            indices = np.sort(rng.permutation(base.size)[:max_elements])
        for flat_index in indices:
            quotients = []
            for step in (h, h / 2):
                values = [a.copy() for a in arrays]
                values[k].reshape(-1)[flat_index] += step
                plus = evaluate(values)
                values[k].reshape(-1)[flat_index] -= 2 * step
                minus = evaluate(values)
                quotients.append((plus - minus) / (2 * step))
            numeric, half = quotients
            if abs(numeric - half) > 1e-5 * max(abs(numeric), abs(half), 1.0):
                excluded += 1
                continue
            a = float(analytic[k].reshape(-1)[flat_index])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, rel)
            checked += 1
    logger.debug(f"gradcheck: checked={checked} excluded={excluded} max_rel_error={worst:.3e}")
    return GradCheckResult(max_rel_error=worst, checked=checked, excluded=excluded)
