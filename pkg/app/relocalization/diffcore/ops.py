"""
Primitive differentiable ops

Every op computes its forward value with numpy and, when an input needs a
gradient and a Tape is active, records a vector-Jacobian product closure.
Binary ops broadcast like numpy; gradients are summed back to the input
shape.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.relocalization.diffcore.tensor import Tensor, active_tape, as_tensor
from app.relocalization.exceptions import DimensionError

Operand = Union[Tensor, np.ndarray, float, int]
Layer = Tuple[Tensor, Tensor]


def _record(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(np.asarray(out_data), requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(op, out, inputs, backward)
    return out


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ============================================================================
# Elementwise arithmetic
# ============================================================================


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    c = np.asarray(factor, dtype=x.dtype)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is 0."""
    x = as_tensor(x)
    mask = (x.data > 0).astype(x.dtype)
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: 0.5 x^2 inside |x| <= delta, delta (|x| - delta/2) outside."""
    x = as_tensor(x)
    a = np.abs(x.data)
    inside = a <= delta
    y = np.where(inside, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))
    slope = np.where(inside, x.data, delta * np.sign(x.data)).astype(x.dtype)
    return _record("huber", y.astype(x.dtype), (x,), lambda g: (g * slope,))


# ============================================================================
# Reductions and shape ops
# ============================================================================


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", out, (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    total = sum(x, axis=axis, keepdims=keepdims)
    return scale(total, 1.0 / count) if count else total


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def backward(g):
        ge = np.expand_dims(g, axis)
        ne = np.expand_dims(n, axis)
        safe = np.where(ne > 0, ne, 1.0)
        return (np.where(ne > 0, ge * x.data / safe, 0.0),)

    return _record("norm", n, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _record("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", out, (x,), backward)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    """Stack tensors along ``axis``; every other dimension must agree."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    first = next((t for t in tensors if isinstance(t, Tensor)), None)
    parts = tuple(as_tensor(t, like=first) for t in tensors)
    ref = parts[0]
    ax = axis % ref.ndim
    for part in parts[1:]:
        if part.ndim != ref.ndim or any(
            part.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {part.shape} differ off axis {ax}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _record("concat", out, parts, lambda g: tuple(np.split(g, splits, axis=ax)))


# ============================================================================
# Linear algebra and network blocks
# ============================================================================


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", np.matmul(a.data, b.data), (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction, so large logits never overflow."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x = as_tensor(x)
    dim = x.shape[-1]
    if dim < 2:
        raise DimensionError(f"layer_norm needs a normalized axis of length >= 2, got {dim}")
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match {dim}")

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward(g):
        g_gain = (g * x_hat).reshape(-1, dim).sum(axis=0)
        g_bias = g.reshape(-1, dim).sum(axis=0)
        g_hat = g * gain.data
        g_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return g_x, g_gain, g_bias

    return _record("layer_norm", out, (x, gain, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    return add(matmul(x, weight), bias)


def mlp_forward(x: Tensor, layers: Sequence[Layer]) -> Tensor:
    """Affine layers with ReLU between them; the last layer stays linear."""
    if not layers:
        raise DimensionError("mlp_forward needs at least one layer")
    for i, (weight, bias) in enumerate(layers):
        if x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"mlp layer {i}: input width {x.shape[-1]} != {weight.shape[0]}")
        x = linear(x, weight, bias)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def zeros(shape: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def _install_operators() -> None:
    Tensor.__add__ = add
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = sub
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = mul
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__truediv__ = div
    Tensor.__rtruediv__ = lambda self, other: div(other, self)
    Tensor.__neg__ = lambda self: scale(self, -1.0)
    Tensor.__matmul__ = matmul
    Tensor.__getitem__ = getitem


_install_operators()
