"""Tensor values and the reverse-mode differentiation tape.

Every numeric array in the engine is a ``Tensor``: a float64 numpy buffer
(row-major) plus a ``requires_grad`` flag and an optional gradient buffer of
the same shape. Operations executed while a ``Tape`` is active append a node
recording their operands, result, and a backward rule; ``Tape.backward``
replays the nodes in reverse execution order, which is a valid topological
order by construction.

Broadcasting is deliberately narrow: scalars, plus trailing-suffix addition
(bias vectors, positional tables). Keeping the rules this small keeps every
backward rule auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = _STATE.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape currently recording in this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 value, optionally carrying a gradient buffer.

    The shape is fixed at construction; ``reshape``/``transpose`` return new
    tensors. Values (``.data``) may be updated in place by an optimizer, but
    never by recorded operations.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps rank-0 scalars rank-0
        self.data: Array = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul_elementwise(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor; discovered by name during module traversal."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class TapeNode:
    """One recorded operation: operands, result, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[Array], tuple[Optional[Array], ...]]):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable operations.

    Used as a context manager; nesting pushes a fresh tape, so inner scopes
    can differentiate independently. A second ``backward`` on the same tape
    without zeroing gradients adds the same contributions again (gradients
    double) — callers are expected to use a fresh tape per training step.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

        ``loss`` must be scalar. Each node is visited exactly once, in
        reverse recording order; gradients for values used several times add
        up. Propagation runs through a sweep-local table so repeated sweeps
        are independent of previously stored ``.grad`` buffers.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward on an empty tape")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            if out_grad is None:
                continue
            holders.pop(id(node.output), None)
            out = node.output
            out.grad = out_grad.copy() if out.grad is None else out.grad + out_grad
            in_grads = node.backward_fn(out_grad)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = tensor
        for key, g in grads.items():
            tensor = holders[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def record_op(inputs: Sequence[Tensor], out_data: Array,
              backward_fn: Callable[[Array], tuple[Optional[Array], ...]]) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient array (or None) per input, in order.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _sum_to_suffix(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back down to a trailing-suffix shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


def _check_addable(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb:
        return
    if sa == () or sb == ():
        return
    # trailing-suffix broadcast (bias vectors, positional tables)
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; also accepts scalars and trailing-suffix operands."""
    a, b = as_tensor(a), as_tensor(b)
    _check_addable(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g: Array):
        return _sum_to_suffix(g, a.shape), _sum_to_suffix(g, b.shape)

    return record_op((a, b), out, backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def backward(g: Array):
        return _sum_to_suffix(g, a.shape), -_sum_to_suffix(g, b.shape)

    return record_op((a, b), out, backward)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; gradient of each side is the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g: Array):
        return (_sum_to_suffix(g * b_data, a.shape),
                _sum_to_suffix(g * a_data, b.shape))

    return record_op((a, b), out, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g: Array):
        return (g * factor,)

    return record_op((a,), a.data * factor, backward)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape

    def backward(g: Array):
        return (np.full(shape, g.reshape(())),)

    return record_op((a,), np.asarray(a.data.sum()), backward)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b.

    Both operands must be at least 2-D. Either the leading (batch)
    dimensions match exactly, or ``b`` is a plain matrix shared across the
    batch. Backward: dA = dC·Bᵀ and dB = Aᵀ·dC, with the shared-matrix case
    summing dB over the batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g: Array):
        da = np.matmul(g, np.swapaxes(b_data, -1, -2))
        if shared and a_data.ndim > 2:
            a2 = a_data.reshape(-1, a_data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            db = a2.T @ g2
        else:
            db = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return da, db

    return record_op((a, b), out, backward)


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record_op((x,), y, backward)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {in_shape} -> {shape}: {exc}") from None

    def backward(g: Array):
        return (g.reshape(in_shape),)

    return record_op((x,), out, backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: Array):
        return (g.transpose(inverse),)

    return record_op((x,), x.data.transpose(axes), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along one axis."""
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] outside axis {axis} of {x.shape}")
    index = tuple(slice(None) if d != axis else slice(start, start + length)
                  for d in range(x.ndim))
    in_shape = x.shape

    def backward(g: Array):
        full = np.zeros(in_shape)
        full[index] = g
        return (full,)

    return record_op((x,), x.data[index].copy(), backward)


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading axis; backward sums it away."""

    def backward(g: Array):
        return (g.sum(axis=0),)

    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return record_op((x,), out, backward)


# ---------------------------------------------------------------------------
# Finite-difference verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Worst relative disagreement between tape gradients and central
    differences of the scalar function ``f`` at ``x``.

    Returns max over coordinates of |analytic - central| / max(1, |central|).
    ``x.data`` is perturbed in place and restored, so ``f`` may close over
    the same tensor it receives.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    had_flag = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            tape.backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = had_flag
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.shape)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = float(f(x).data.reshape(()))
        flat[i] = original - eps
        lo = float(f(x).data.reshape(()))
        flat[i] = original
        numeric[i] = (hi - lo) / (2.0 * eps)
    if np.isnan(numeric).any() or np.isnan(analytic).any():
        raise NumericError("finite_diff_check: NaN encountered")
    numeric = numeric.reshape(x.shape)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(rel.max())
