"""
Dense tensors with reverse-mode automatic differentiation.

Only the primitives the lab needs are implemented. Every differentiable
operation records a ``TapeNode`` holding its inputs and a backward rule; a
call to ``backward`` walks the tape once in reverse topological order and
accumulates gradients into the leaves that asked for them.

Payloads are numpy arrays in 32-bit by default. Gradient checks switch to
64-bit with the ``precision`` context manager.
"""

import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from helpers.constants import LOG_ABS_FLOOR
from helpers.exceptions import DimensionError, DivideByZeroError, GradientError

logger = logging.getLogger("lab")

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}

ELEMENTWISE_OPS = ("add", "sub", "mul", "div", "scale")
ACTIVATIONS = ("sigmoid", "relu", "log_abs")
REDUCTIONS = ("sum", "mean", "sq_l2_norm")
POOL_MODES = ("avg", "max")


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextmanager
def precision(dtype: str | type | np.dtype) -> Iterator[None]:
    """Temporarily change the element type of newly created tensors."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording tape nodes (frozen oracle forwards, inference)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


@dataclass(eq=False)
class TapeNode:
    """One recorded operation: its inputs and the rule mapping upstream grad to input grads."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """A dense real array, optionally a leaf that collects gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        self.data = np.array(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.name = name

    # Introspection
    @property
    def shape(self) -> tuple[int, ...]:
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
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # Operator sugar
    def __add__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: float) -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: float) -> "Tensor":
        return elementwise("add", elementwise("scale", self, -1.0), other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return elementwise("scale", self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return elementwise("scale", self, other)

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("div", self, other)

    def __neg__(self) -> "Tensor":
        return elementwise("scale", self, -1.0)


def tensor(data: Any, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)


def ones(shape: Sequence[int], requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad, name=name)


def _record(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule: Callable, **saved: Any) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op=op, inputs=inputs, backward=rule, saved=saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back onto an operand of ``shape`` that was broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value: "Tensor | float", like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.dtype)


# Elementwise arithmetic


def elementwise(op: str, a: Tensor, b: "Tensor | float") -> Tensor:
    """Apply ``op`` elementwise with numpy broadcasting; broadcast axes are sum-reduced on backward."""
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op '{op}', expected one of {ELEMENTWISE_OPS}")

    if op == "scale":
        if isinstance(b, Tensor):
            raise DimensionError("scale takes a real scalar, not a tensor")
        factor = float(b)
        return _record(a.data * a.data.dtype.type(factor), "scale", (a,), lambda g: (g * factor,))

    other = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, other.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(other.shape)} are not broadcastable")

    x, y = a.data, other.data
    if op == "add":
        return _record(x + y, op, (a, other), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))
    if op == "sub":
        return _record(x - y, op, (a, other), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))
    if op == "mul":
        return _record(
            x * y, op, (a, other), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
        )

    if np.any(y == 0):
        raise DivideByZeroError(f"div: divisor of shape {list(y.shape)} contains exact zeros")
    return _record(
        x / y,
        op,
        (a, other),
        lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
    )


# Activations


def activation(op: str, x: Tensor) -> Tensor:
    """sigmoid, relu or log_abs (log of max(|x|, 1e-8))."""
    v = x.data
    if op == "sigmoid":
        e = np.exp(-np.abs(v))
        out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
        return _record(out, op, (x,), lambda g: (g * out * (1.0 - out),))
    if op == "relu":
        mask = v > 0
        return _record(np.where(mask, v, 0).astype(v.dtype), op, (x,), lambda g: (g * mask,))
    if op == "log_abs":
        magnitude = np.abs(v)
        live = magnitude >= LOG_ABS_FLOOR
        out = np.log(np.maximum(magnitude, LOG_ABS_FLOOR)).astype(v.dtype)
        safe = np.where(live, v, 1.0)
        return _record(out, op, (x,), lambda g: (np.where(live, g / safe, 0.0).astype(v.dtype),))
    raise ValueError(f"unknown activation '{op}', expected one of {ACTIVATIONS}")


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def log_abs(x: Tensor) -> Tensor:
    return activation("log_abs", x)


def clamp(x: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    """Clip to [low, high]; gradient flows only where the input was inside the interval."""
    v = x.data
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    inside = (v >= lo) & (v <= hi)
    return _record(np.clip(v, lo, hi).astype(v.dtype), "clamp", (x,), lambda g: (g * inside,))


def magnitude(x: Tensor, floor: float) -> Tensor:
    """max(|x|, floor), with zero gradient below the floor."""
    v = x.data
    live = np.abs(v) >= floor
    out = np.maximum(np.abs(v), floor).astype(v.dtype)
    return _record(out, "magnitude", (x,), lambda g: (np.where(live, g * np.sign(v), 0.0).astype(v.dtype),))


def sqrt(x: Tensor) -> Tensor:
    v = x.data
    if np.any(v < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(v)
    positive = out > 0
    safe = np.where(positive, out, 1.0)
    return _record(out, "sqrt", (x,), lambda g: (np.where(positive, g / (2.0 * safe), 0.0).astype(v.dtype),))


# Reductions


def _normalize_axes(axes: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise DimensionError(f"axis {axis} is out of range for a rank-{ndim} tensor")
        normalized.append(axis % ndim)
    if len(set(normalized)) != len(normalized):
        raise DimensionError(f"repeated axis in {list(axes)}")
    return tuple(sorted(normalized))


def reduce(op: str, x: Tensor, axes: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    """sum, mean or sq_l2_norm (sum of squares) over ``axes`` (all axes when None)."""
    if op not in REDUCTIONS:
        raise ValueError(f"unknown reduction '{op}', expected one of {REDUCTIONS}")
    axis_set = _normalize_axes(axes, x.ndim)
    v = x.data
    count = int(np.prod([v.shape[a] for a in axis_set])) if axis_set else 1

    def expand(g: np.ndarray) -> np.ndarray:
        if not keepdims:
            g = np.expand_dims(g, axis_set) if axis_set else g
        return np.broadcast_to(g, v.shape)

    if op == "sum":
        out = v.sum(axis=axis_set, keepdims=keepdims)
        return _record(np.asarray(out), op, (x,), lambda g: (expand(g).astype(v.dtype),))
    if op == "mean":
        out = v.mean(axis=axis_set, keepdims=keepdims)
        return _record(np.asarray(out), op, (x,), lambda g: ((expand(g) / count).astype(v.dtype),))
    out = (v * v).sum(axis=axis_set, keepdims=keepdims)
    return _record(np.asarray(out), op, (x,), lambda g: ((2.0 * v * expand(g)).astype(v.dtype),))


def sum_all(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


def average(values: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of same-shaped tensors, summed in index order."""
    if not values:
        raise DimensionError("average of an empty list")
    total = values[0]
    for value in values[1:]:
        total = total + value
    if len(values) == 1:
        return total
    return total * (1.0 / len(values))


# Channel-axis plumbing


def _require_chw(x: Tensor, op: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{op}: expected a [C,H,W] tensor, got shape {list(x.shape)}")


def pool_over_channels(x: Tensor, mode: str) -> Tensor:
    """Mean or maximum over the channel axis, keeping it as a single channel."""
    _require_chw(x, "pool_over_channels")
    if x.size == 0 or x.shape[0] < 1:
        raise DimensionError(f"pool_over_channels: empty tensor of shape {list(x.shape)}")
    v = x.data
    if mode == "avg":
        channels = v.shape[0]
        return _record(
            v.mean(axis=0, keepdims=True),
            "pool_avg",
            (x,),
            lambda g: ((np.broadcast_to(g, v.shape) / channels).astype(v.dtype),),
        )
    if mode == "max":
        # argmax returns the first index on ties
        index = np.argmax(v, axis=0)[None, :, :]
        out = np.take_along_axis(v, index, axis=0)

        def rule(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros_like(v)
            np.put_along_axis(grad, index, g, axis=0)
            return (grad,)

        return _record(out, "pool_max", (x,), rule)
    raise ValueError(f"unknown pool mode '{mode}', expected one of {POOL_MODES}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_chw(a, "concat_channels")
    _require_chw(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(
            f"concat_channels: spatial extents differ (H,W) {list(a.shape[1:])} vs {list(b.shape[1:])}"
        )
    split = a.shape[0]
    return _record(
        np.concatenate([a.data, b.data], axis=0),
        "concat",
        (a, b),
        lambda g: (g[:split], g[split:]),
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_chw(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice_channels: [{start}:{stop}] outside channel extent {x.shape[0]}")
    v = x.data

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(v)
        grad[start:stop] = g
        return (grad,)

    return _record(v[start:stop].copy(), "slice", (x,), rule)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling by an integer factor on both spatial axes."""
    _require_chw(x, "avg_pool2d")
    channels, height, width = x.shape
    if factor < 1 or height % factor or width % factor:
        raise DimensionError(f"avg_pool2d: spatial extents {height}x{width} not divisible by {factor}")
    if factor == 1:
        return x
    v = x.data
    out = v.reshape(channels, height // factor, factor, width // factor, factor).mean(axis=(2, 4))
    area = factor * factor

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return ((np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / area).astype(v.dtype),)

    return _record(out, "avg_pool2d", (x,), rule)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _require_chw(x, "upsample_nearest")
    if factor < 1:
        raise DimensionError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    channels, height, width = x.shape
    v = x.data
    out = np.repeat(np.repeat(v, factor, axis=1), factor, axis=2)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(channels, height, factor, width, factor).sum(axis=(2, 4)),)

    return _record(out, "upsample_nearest", (x,), rule)


# Convolution


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    Direct cross-correlation of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.

    Output extents follow the usual floor rule; trailing input rows or columns
    that do not complete a window at the given stride are not visited.
    """
    _require_chw(x, "conv2d")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [C_out,C_in,k,k], got shape {list(kernel.shape)}")
    out_channels, in_channels, kh, kw = kernel.shape
    if in_channels != x.shape[0]:
        raise DimensionError(
            f"conv2d: kernel axis 1 (C_in={in_channels}) does not match input axis 0 (C={x.shape[0]})"
        )
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes 2,3 must be equal and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(
            f"conv2d: bias axis 0 ({list(bias.shape)}) does not match kernel axis 0 (C_out={out_channels})"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    _, height, width = x.shape
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: spatial axes (H={height}, W={width}) with padding {padding} are smaller than kernel {kh}"
        )

    k = kh
    out_h = conv_output_extent(height, k, stride, padding)
    out_w = conv_output_extent(width, k, stride, padding)
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    weights = kernel.data
    out = np.tensordot(windows, weights, axes=([0, 3, 4], [1, 2, 3])).transpose(2, 0, 1)
    if bias is not None:
        out = out + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        grad_kernel = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.tensordot(
                    weights[:, :, i, j], g, axes=([0], [0])
                )
        grad_input = grad_padded[:, padding : padding + height, padding : padding + width] if padding else grad_padded
        grad_bias = g.sum(axis=(1, 2)) if bias is not None else None
        return grad_input, grad_kernel, grad_bias

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    if bias is None:
        return _record(out, "conv2d", inputs, lambda g: rule(g)[:2], stride=stride, padding=padding)
    return _record(out, "conv2d", inputs, rule, stride=stride, padding=padding)


# Backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.node is not None:
            for parent in reversed(node.node.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf with requires_grad.

    Gradients accumulate across calls; reset them with ``zero_grad`` (the
    optimizer does this after every step).
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for current in reversed(_topological_order(loss)):
        upstream = pending.pop(id(current), None)
        if upstream is None:
            continue
        if current.node is None:
            grad = np.asarray(upstream, dtype=current.dtype).reshape(current.shape)
            current.grad = grad.copy() if current.grad is None else current.grad + grad
            continue
        for parent, grad in zip(current.node.inputs, current.node.backward(upstream), strict=False):
            if grad is None or not parent.requires_grad:
                continue
            grad = np.asarray(grad).reshape(parent.shape)
            key = id(parent)
            pending[key] = grad if key not in pending else pending[key] + grad
