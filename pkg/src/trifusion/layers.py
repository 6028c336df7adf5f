"""Differentiable layers shared by the three backbones and the fusion head.

Layers are plain objects holding :class:`~trifusion.tensor.Parameter` leaves
(trainable) and :class:`~trifusion.tensor.Tensor` buffers (state such as
batch-norm running statistics). ``Module`` discovers both by attribute scan,
so parameter names mirror the attribute path (``blocks.1.pw.weight``).

Convolutions are cross-correlations (no kernel flip), gathered into column
matrices by looping over the kernel offsets; the backward pass scatters the
column gradients back with the mirrored loop.
"""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (Array, Parameter, Tensor, record_op)


class Module:
    """Minimal layer container: parameter discovery, modes, freezing."""

    training: bool = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _entries(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Parameters plus buffers, in stable attribute order."""
        for name, value in self._entries():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_state(f"{full}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._entries():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def is_frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and not any(p.requires_grad for p in params)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: Array):
        return (g * mask,)

    return record_op((x,), np.where(mask, x.data, 0.0), backward)


def relu6(x: Tensor) -> Tensor:
    mask = (x.data > 0) & (x.data < 6.0)

    def backward(g: Array):
        return (g * mask,)

    return record_op((x,), np.clip(x.data, 0.0, 6.0), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g: Array):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner
        return (g * dy,)

    return record_op((x,), y, backward)


_ACTIVATIONS = {"relu": relu, "relu6": relu6, "gelu": gelu}


def activation(name: str):
    if name not in _ACTIVATIONS:
        raise ContractError(f"unknown activation '{name}'")
    return _ACTIVATIONS[name]


# ---------------------------------------------------------------------------
# Concatenation / splitting
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; backward splits the gradient back."""
    if not tensors:
        raise ContractError("concat of an empty list")
    first = tensors[0].shape
    axis = axis % len(first)
    for t in tensors[1:]:
        same = (t.ndim == len(first)
                and all(t.shape[d] == first[d]
                        for d in range(len(first)) if d != axis))
        if not same:
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: Array):
        pieces = []
        for i in range(len(sizes)):
            index = tuple(slice(None) if d != axis else slice(offsets[i], offsets[i + 1])
                          for d in range(g.ndim))
            pieces.append(g[index])
        return tuple(pieces)

    return record_op(tuple(tensors), out, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Partition ``x`` along an axis into consecutive pieces."""
    from .tensor import narrow
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} "
                         f"of {x.shape}")
    pieces, start = [], 0
    for s in sizes:
        pieces.append(narrow(x, axis, start, s))
        start += s
    return pieces


# ---------------------------------------------------------------------------
# Convolution machinery
# ---------------------------------------------------------------------------

def _pad_hw(x: Array, pad: int) -> Array:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _gather_patches(xp: Array, kh: int, kw: int, stride: int,
                    oh: int, ow: int) -> Array:
    """Window gather: padded [b,c,hp,wp] -> columns [b,c,kh,kw,oh,ow]."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols


def _scatter_patches(dcols: Array, hp: int, wp: int, stride: int) -> Array:
    """Adjoint of :func:`_gather_patches`: scatter-add columns back."""
    b, c, kh, kw, oh, ow = dcols.shape
    dxp = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride,
                j:j + stride * ow:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [b,c,h,w] with [out,c,kh,kw] filters."""
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, filters expect {ic}")
    oh, ow = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * pad}x{w + 2 * pad}")
    xp = _pad_hw(x.data, pad)
    cols = _gather_patches(xp, kh, kw, stride, oh, ow)
    cols2 = cols.reshape(b, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(oc, c * kh * kw)
    out = np.matmul(wmat, cols2).reshape(b, oc, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    hp, wp = xp.shape[2], xp.shape[3]

    with_bias = bias is not None

    def backward(g: Array):
        gm = g.reshape(b, oc, oh * ow)
        dw = np.matmul(gm, cols2.transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(wmat.T, gm).reshape(b, c, kh, kw, oh, ow)
        dxp = _scatter_patches(dcols, hp, wp, stride)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        dw = dw.reshape(weight.shape)
        if with_bias:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    inputs = (x, weight, bias) if with_bias else (x, weight)
    return record_op(inputs, out, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """One spatial filter per channel: [b,c,h,w] with [c,1,kh,kw]."""
    b, c, h, w = x.shape
    wc, one, kh, kw = weight.shape
    if wc != c or one != 1:
        raise ShapeError(f"depthwise_conv2d: {c}-channel input, "
                         f"filter bank is {weight.shape}")
    oh, ow = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError("depthwise_conv2d: kernel larger than padded input")
    xp = _pad_hw(x.data, pad)
    cols = _gather_patches(xp, kh, kw, stride, oh, ow)
    colsq = cols.reshape(b, c, kh * kw, oh * ow)
    wk = weight.data.reshape(c, kh * kw)
    out = np.einsum("bckq,ck->bcq", colsq, wk, optimize=True)
    out = out.reshape(b, c, oh, ow)
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g: Array):
        gq = g.reshape(b, c, oh * ow)
        dw = np.einsum("bcq,bckq->ck", gq, colsq, optimize=True)
        dcols = np.einsum("bcq,ck->bckq", gq, wk, optimize=True)
        dxp = _scatter_patches(dcols.reshape(b, c, kh, kw, oh, ow),
                               hp, wp, stride)
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dw.reshape(weight.shape)

    return record_op((x, weight), out, backward)


def pointwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution: a dense layer over channels at every pixel."""
    if weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise_conv2d: kernel must be 1x1, got {weight.shape}")
    return conv2d(x, weight)


def avg_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping window mean; floors away a ragged border."""
    b, c, h, w = x.shape
    if h < k or w < k:
        raise ContractError(f"avg_pool2d: input {h}x{w} smaller than window {k}")
    oh, ow = _out_extent(h, k, stride, 0), _out_extent(w, k, stride, 0)
    acc = np.zeros((b, c, oh, ow))
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out = acc / (k * k)

    def backward(g: Array):
        dx = np.zeros((b, c, h, w))
        gshare = g / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * oh:stride,
                   j:j + stride * ow:stride] += gshare
        return (dx,)

    return record_op((x,), out, backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions [b,c,h,w]->[b,c] or tokens [b,t,d]->[b,d]."""
    if x.ndim == 4:
        b, c, h, w = x.shape
        n = h * w
        if n == 0:
            raise ContractError("global_average_pool: empty spatial extent")
        out = x.data.mean(axis=(2, 3))

        def backward(g: Array):
            return (np.broadcast_to(g[:, :, None, None] / n, (b, c, h, w)).copy(),)

        return record_op((x,), out, backward)
    if x.ndim == 3:
        b, t, d = x.shape
        if t == 0:
            raise ContractError("global_average_pool: empty token axis")
        out = x.data.mean(axis=1)

        def backward(g: Array):
            return (np.broadcast_to(g[:, None, :] / t, (b, t, d)).copy(),)

        return record_op((x,), out, backward)
    raise ShapeError(f"global_average_pool: rank {x.ndim} unsupported")


# ---------------------------------------------------------------------------
# Layer classes
# ---------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense(Module):
    """Affine map x·W + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, w_std: Optional[float] = None):
        std = np.sqrt(2.0 / (in_dim + out_dim)) if w_std is None else w_std
        self.weight = Parameter(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        from .tensor import add, matmul
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0,
                 bias: bool = False):
        if k < 1 or stride < 1:
            raise ContractError("Conv2d: kernel and stride must be >= 1")
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, k, k),
                                          in_ch * k * k))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        self.weight = Parameter(he_normal(rng, (channels, 1, k, k), k * k))
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm(Module):
    """Per-channel batch normalization for [b,c,h,w] or [b,c] inputs.

    Training mode normalizes with biased batch statistics and updates the
    running buffers as running = momentum*running + (1-momentum)*batch;
    evaluation mode uses the running buffers only.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            axes, cshape = (0, 2, 3), (1, -1, 1, 1)
        elif x.ndim == 2:
            axes, cshape = (0,), (1, -1)
        else:
            raise ShapeError(f"BatchNorm: rank {x.ndim} unsupported")
        gamma, beta = self.gamma, self.beta
        g = gamma.data.reshape(cshape)
        b = beta.data.reshape(cshape)

        if self.training:
            if x.shape[0] < 2:
                raise ContractError(
                    "BatchNorm in training mode needs batch size >= 2")
            mean = x.data.mean(axis=axes, keepdims=True)
            var = x.data.var(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean.data = (m * self.running_mean.data
                                      + (1 - m) * mean.reshape(-1))
            self.running_var.data = (m * self.running_var.data
                                     + (1 - m) * var.reshape(-1))
        else:
            mean = self.running_mean.data.reshape(cshape)
            var = self.running_var.data.reshape(cshape)

        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean) * inv
        out = g * xhat + b
        n = int(np.prod([x.shape[a] for a in axes]))
        train = self.training

        def backward(grad: Array):
            dgamma = (grad * xhat).sum(axis=axes)
            dbeta = grad.sum(axis=axes)
            dxhat = grad * g
            if train:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv
            return dx, dgamma, dbeta

        return record_op((x, gamma, beta), out, backward)


class LayerNorm(Module):
    """Normalization over the last axis followed by an affine map."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(f"LayerNorm over {self.gamma.shape[0]} features, "
                             f"input is {x.shape}")
        gamma, beta = self.gamma, self.beta
        d = x.shape[-1]
        mean = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean) * inv
        out = gamma.data * xhat + beta.data
        reduce_axes = tuple(range(x.ndim - 1))

        def backward(grad: Array):
            dgamma = (grad * xhat).sum(axis=reduce_axes)
            dbeta = grad.sum(axis=reduce_axes)
            dxhat = grad * gamma.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            dx = (inv / d) * (d * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return record_op((x, gamma, beta), out, backward)


class Dropout(Module):
    """Inverted dropout with a counter-based generator.

    Each training-mode forward draws its mask from Philox keyed by
    (seed, call counter), so a run is reproducible bit-for-bit from the seed
    and masks can be replayed by resetting the counter.
    """

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.counter = 0

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        rng = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.counter],
                                          dtype=np.uint64)))
        self.counter += 1
        keep = rng.random(x.shape) >= self.rate
        mask = keep / (1.0 - self.rate)

        def backward(g: Array):
            return (g * mask,)

        return record_op((x,), x.data * mask, backward)
