"""Minimal float32 tensor engine with tape-based reverse-mode autodiff.

Feature maps are stored channels-last (``[n, h, w, c]``) and convolution
kernels as ``[u, v, c_in, c_out]`` so the filter axis is always the last one.
Operations only record themselves when a :class:`Tape` is active and at least
one input requires a gradient; outside a tape everything runs as plain numpy.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops executed inside the block are recorded and
    :meth:`backward` replays them in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), fn))
        self._produced[id(out)] = out

    def __contains__(self, t: Tensor) -> bool:
        return self._produced.get(id(t)) is t

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring tensors consumed by the tape but not produced on it."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t not in self and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` backwards from the scalar ``loss``.

    Every leaf parameter seen on the tape gets ``.grad`` set (zeros when the
    loss does not depend on it); the same arrays are returned keyed by tensor.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    result = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=DTYPE)
        leaf.grad = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].record(out, inputs, fn)
    return out


def _want(t: Tensor) -> bool:
    return t.requires_grad


# --------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        s = DTYPE(b)
        return _emit(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul operands differ: {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum(dtype=DTYPE)).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            t.shape[d] != xs[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(f"concat operands differ off-axis: {xs[0].shape} vs {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=ax)
    return _emit(out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    if bias.shape != (x.shape[-1],):
        raise ShapeError(f"bias length {bias.shape} does not match channel dim {x.shape[-1]}")
    axes = tuple(range(x.ndim - 1))
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """Output length of a strided window; trailing rows that do not fit are dropped."""
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} exceeds padded input size {size + 2 * padding}")
    return span // stride + 1


def _im2col(xp: np.ndarray, u: int, v: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, u, v, c), dtype=DTYPE)
    for i in range(u):
        for j in range(v):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, u * v * c)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` ([n,]h,w,c_in) with ``kernel`` (u,v,c_in,c_out)."""
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding: {stride}, {padding}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [n,h,w,c] input and [u,v,c_in,c_out] kernel, "
                         f"got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    u, v, kc, co = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel input channels ({kc}) != input channels ({c})")
    ho = conv_output_size(h, u, stride, padding)
    wo = conv_output_size(w, v, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, u, v, stride, ho, wo)
    wmat = kernel.data.reshape(u * v * c, co)
    out = (cols @ wmat).reshape(n, ho, wo, co)

    def back(g):
        g2 = g.reshape(-1, co)
        gk = (cols.T @ g2).reshape(kernel.shape) if _want(kernel) else None
        gx = None
        if _want(x):
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, u, v, c)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(u):
                for j in range(v):
                    dxp[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, padding:padding + h, padding:padding + w, :]
        return gx, gk

    y = _emit(out, (x, kernel), back)
    return reshape(y, y.shape[1:]) if squeeze else y


# --------------------------------------------------------------------------
# batch normalization


def batchnorm(x: Tensor, mu: Tensor, sigma: Tensor, gamma: Tensor, beta: Tensor,
              mode: str = "eval", momentum: float = 0.1) -> Tensor:
    """Per-channel ``(x - mu) / sigma * gamma + beta`` over the last axis.

    ``sigma`` is a standard deviation that already includes the variance
    stabilizer. In train mode the batch statistics are used for the output and
    ``mu``/``sigma`` are replaced by their exponential moving averages.
    """
    c = x.shape[-1]
    for name, t in (("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm {name} has shape {t.shape}, expected ({c},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "eval":
        if np.any(sigma.data <= 0):
            raise ValueError("batchnorm sigma must be positive in eval mode")
        centered = x.data - mu.data
        out = centered / sigma.data * gamma.data + beta.data

        def back(g):
            gx = g * (gamma.data / sigma.data) if _want(x) else None
            gg = (g * (centered / sigma.data)).sum(axis=axes) if _want(gamma) else None
            gb = g.sum(axis=axes) if _want(beta) else None
            gmu = -(g * (gamma.data / sigma.data)).sum(axis=axes) if _want(mu) else None
            gs = (-(g * centered).sum(axis=axes) * gamma.data / sigma.data ** 2
                  if _want(sigma) else None)
            return gx, gmu, gs, gg, gb

        return _emit(out, (x, mu, sigma, gamma, beta), back)
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    count = x.size // c
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    std = np.sqrt(var + DTYPE(BN_EPS)).astype(DTYPE)
    xhat = (x.data - mean) / std
    out = xhat * gamma.data + beta.data
    m = DTYPE(momentum)
    mu.data = ((1 - m) * mu.data + m * mean).astype(DTYPE)
    sigma.data = ((1 - m) * sigma.data + m * std).astype(DTYPE)

    def back(g):
        gg = (g * xhat).sum(axis=axes) if _want(gamma) else None
        gb = g.sum(axis=axes) if _want(beta) else None
        gx = None
        if _want(x):
            dxhat = g * gamma.data
            gx = (count * dxhat - dxhat.sum(axis=axes)
                  - xhat * (dxhat * xhat).sum(axis=axes)) / (count * std)
        return gx, None, None, gg, gb

    return _emit(out, (x, mu, sigma, gamma, beta), back)


# --------------------------------------------------------------------------
# pooling


def _pool_windows(x: np.ndarray, size: int, stride: int):
    n, h, w, c = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {size} larger than input {h}x{w}")
    return ho, wo


def avgpool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or size
    ho, wo = _pool_windows(x.data, size, stride)
    acc = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=DTYPE)
    for i in range(size):
        for j in range(size):
            acc += x.data[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    scale = DTYPE(1.0 / (size * size))

    def back(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gs = g * scale
        for i in range(size):
            for j in range(size):
                gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gs
        return (gx,)

    return _emit(acc * scale, (x,), back)


def maxpool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or size
    ho, wo = _pool_windows(x.data, size, stride)
    views = [x.data[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
             for i in range(size) for j in range(size)]
    stacked = np.stack(views, axis=-1)
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for k in range(size * size):
            i, j = divmod(k, size)
            gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                np.where(arg == k, g, DTYPE(0))
        return (gx,)

    return _emit(out, (x,), back)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [n,h,w,c] -> [n,c]."""
    n, h, w, c = x.shape
    scale = DTYPE(1.0 / (h * w))
    out = x.data.mean(axis=(1, 2), dtype=DTYPE)
    return _emit(out, (x,), lambda g: (np.broadcast_to((g * scale)[:, None, None, :], x.shape).copy(),))


# --------------------------------------------------------------------------
# classifier


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored [in, out]."""
    if x.ndim != 2:
        x = reshape(x, (x.shape[0], -1))
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear input features ({x.shape[1]}) != weight rows ({weight.shape[0]})")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data.T if _want(x) else None
        gw = x.data.T @ g if _want(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, back)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean(dtype=DTYPE)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _emit(np.asarray(loss, dtype=DTYPE).reshape(()), (logits,), back)


# --------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``t.data``."""
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + DTYPE(step)
        up = fn().item()
        flat[k] = orig - DTYPE(step)
        down = fn().item()
        flat[k] = orig
        grad[k] = (up - down) / (2 * step)
    return grad.reshape(t.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], step: float = 1e-3) -> dict:
    """Relative error between tape gradients and central differences.

    Returns ``{name_or_index: rel_err}`` with rel_err = ||a - n|| / max(||a||, ||n||).
    """
    inputs = list(inputs)
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    errors = {}
    for k, t in enumerate(inputs):
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros(t.shape, dtype=DTYPE)
        numeric = numerical_grad(fn, t, step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        errors[t.name or k] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors
