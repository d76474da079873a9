"""
Dense tensor with tape-based reverse-mode automatic differentiation.

Only the operations the detector needs are implemented. Each operation is a
`Function` subclass with a numpy `forward` and a `backward` that maps the
output gradient to one gradient per input (or None for inputs that do not
require one).
"""
import contextlib
import threading
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


class DimensionError(Exception):
    pass


class UsageError(Exception):
    pass


ArrayLike = Union[np.ndarray, float, int, Sequence]

# graph recording flag, one per thread
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference) for the calling thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _as_float_array(data: ArrayLike, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out dimensions that numpy broadcasting added or stretched."""
    if grad.shape == tuple(to_shape):
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Function:
    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """
    N-dimensional float array with optional gradient tracking.

    `grad` is allocated lazily as zeros the first time it is read, so a leaf
    that did not take part in a backward pass reports an all-zero gradient.
    Repeated `backward` calls accumulate into `grad` until `zero_grad`.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype=None,
    ):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self._grad += grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _wrap(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.dtype)

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other):
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return Mul.apply(self, Tensor(1.0 / np.asarray(other, dtype=np.float64), dtype=self.dtype))
        return Mul.apply(self, Pow.apply(other, exponent=-1.0))

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.size // max(total.size, 1)
        return total * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)

    def backward(self) -> None:
        backward(self)


# -- elementwise -------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.tensors
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.tensors
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Pow(Function):
    def forward(self, a, exponent: float):
        self.exponent = exponent
        return np.power(a, exponent)

    def backward(self, grad):
        (a,) = self.tensors
        if self.exponent == 0.0:
            return (np.zeros_like(a.data),)
        return (grad * self.exponent * np.power(a.data, self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        (a,) = self.tensors
        return (grad / a.data,)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        (a,) = self.tensors
        return (grad * np.sign(a.data),)


class Clip(Function):
    def forward(self, a, low: float, high: float):
        self.passthrough = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.passthrough,)


class ReLU(Function):
    def forward(self, a):
        self.positive = a > 0
        return np.where(self.positive, a, 0.0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.positive,)


class Sigmoid(Function):
    def forward(self, a):
        # tanh form saturates cleanly in both directions
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


class GELU(Function):
    """Tanh approximation, used identically in forward and backward."""

    def forward(self, a):
        self.t = np.tanh(_GELU_K * (a + _GELU_C * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        (a,) = self.tensors
        x = a.data
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)
        local = 0.5 * (1.0 + self.t) + 0.5 * x * (1.0 - self.t ** 2) * dinner
        return (grad * local,)


# -- shape -------------------------------------------------------------------


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        (a,) = self.tensors
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % a.ndim for ax in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from e

    def backward(self, grad):
        return (grad.reshape(self.tensors[0].shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, idx):
        self.idx = idx
        return a[idx]

    def backward(self, grad):
        (a,) = self.tensors
        out = np.zeros_like(a.data)
        np.add.at(out, self.idx, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis: int = -1):
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Pad(Function):
    def forward(self, a, pad_width):
        self.slices = tuple(slice(before, before + extent) for (before, _), extent in zip(pad_width, a.shape))
        return np.pad(a, pad_width)

    def backward(self, grad):
        return (grad[self.slices],)


class Roll(Function):
    def forward(self, a, shifts, axes):
        self.shifts = shifts
        self.axes = axes
        return np.roll(a, shifts, axis=axes)

    def backward(self, grad):
        return (np.roll(grad, tuple(-s for s in self.shifts), axis=self.axes),)


# -- linear algebra ----------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.tensors
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Softmax(Function):
    def forward(self, a):
        shifted = a - np.max(a, axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat * gamma + beta

    def backward(self, grad):
        x, gamma, _ = self.tensors
        n = x.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        ggamma = (grad * self.xhat).sum(axis=lead)
        gbeta = grad.sum(axis=lead)
        gxhat = grad * gamma.data
        gx = (self.inv / n) * (
            n * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (gxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta


class Conv2d(Function):
    """Cross-correlation via strided windows; x [B,Cin,H,W], w [Cout,Cin,kH,kW]."""

    def forward(self, x, w, b, stride: int, pad: int):
        self.stride = stride
        self.pad = pad
        kh, kw = w.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        self.padded_shape = xp.shape
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        self.cols = windows[:, :, ::stride, ::stride]
        out = np.einsum("bchwij,ocij->bohw", self.cols, w, optimize=True)
        return out + b[None, :, None, None]

    def backward(self, grad):
        x, w, _ = self.tensors
        kh, kw = w.shape[2:]
        s = self.stride
        gw = np.einsum("bohw,bchwij->ocij", grad, self.cols, optimize=True)
        gb = grad.sum(axis=(0, 2, 3))
        gcols = np.einsum("bohw,ocij->bchwij", grad, w.data, optimize=True)
        gxp = np.zeros(self.padded_shape, dtype=x.data.dtype)
        ho, wo = grad.shape[2:]
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[..., i, j]
        p = self.pad
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        return gx, gw, gb


# -- functional surface ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from e
    return MatMul.apply(a, b)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax with max-subtraction. -inf logits map to exactly 0; NaN propagates."""
    return Softmax.apply(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def concat(tensors: List[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def pad(x: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    if not any(a or b for a, b in pad_width):
        return x
    return Pad.apply(x, pad_width=pad_width)


def roll(x: Tensor, shifts: Tuple[int, ...], axes: Tuple[int, ...]) -> Tensor:
    return Roll.apply(x, shifts=tuple(shifts), axes=tuple(axes))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if not ((kh % 2 == 1 and kw % 2 == 1) or (stride == kh == kw)):
        raise DimensionError(f"conv2d kernel {kh}x{kw} must be odd or equal to stride {stride}")
    for extent, k in ((x.shape[2], kh), (x.shape[3], kw)):
        if (extent + 2 * pad - k) % stride != 0 or extent + 2 * pad < k:
            raise DimensionError(
                f"conv2d output size not integral for input {x.shape}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor that does not require grad")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node._accumulate(grad)
            continue
        for parent, parent_grad in zip(node.creator.tensors, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare the analytic gradient of scalar f at x with central differences.

    Returns max |analytic - numeric| / max(|analytic|, |numeric|, floor) over
    the checked elements. `max_elements` samples a subset for large tensors.
    """
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = rng.choice(flat.size, size=max_elements, replace=False)

    worst = 0.0
    with no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = f(x).item()
            flat[i] = original - eps
            minus = f(x).item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    x.zero_grad()
    return float(worst)
