"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operator the network and training loop need lives here. An operation
records itself on the innermost active :class:`Tape` when at least one of its
inputs requires a gradient; outside a tape nothing is recorded, which is how
inference runs.

    >>> x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x)
    >>> tape.backward(loss)
    >>> x.grad.shape
    (1, 1, 3, 3)
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "BatchNormStats",
    "backward",
    "conv2d",
    "batch_norm",
    "leaky_relu",
    "max_pool2",
    "upsample_nearest2",
    "concat_channels",
    "split_channels",
    "mean_over_set",
    "expand_set",
    "reshape",
    "add",
    "mul",
    "scale",
    "sum_all",
    "l1_loss",
]

# Set CONTEXTSEIS_CHECK_FINITE=1 to assert finite outputs after every op.
CHECK_FINITE = os.environ.get("CONTEXTSEIS_CHECK_FINITE", "") not in ("", "0")


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor. ``grad`` has the shape of ``data`` once set."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_TAPES: list = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order and the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs: tuple, output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(inputs, output, backward_fn))

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        backward(self, loss, params)


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient and reaches ``loss``.

    Gradients from multiple uses of a tensor are summed. Any tensor listed in
    ``params`` that the loss does not depend on gets an all-zero gradient.
    Existing ``.grad`` values are overwritten, not accumulated across calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_in = node.backward(g_out)
        for t, g in zip(node.inputs, g_in):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            leaves[key] = t
    if id(loss) in grads and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        if key not in produced and key in grads:
            t.grad = grads[key]
    if params is not None:
        for p in params:
            if id(p) not in leaves or id(p) in produced:
                p.grad = np.zeros_like(p.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward operation")
    needs = _TAPES and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=bool(needs))
    if needs:
        _TAPES[-1].record(inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """Elementwise ``x`` for ``x >= 0`` and ``slope * x`` otherwise."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = _as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, x.data * slope, x.data)
    return _emit(out, (x,), lambda g: (np.where(neg, g * slope, g),))


# ---------------------------------------------------------------- convolution


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    # Stride-1 cross-correlation, accumulated one kernel tap at a time; this
    # keeps memory at one input-sized copy instead of a full im2col buffer.
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xt = x.transpose(1, 0, 2, 3)
    out = np.zeros((O, B, Ho, Wo))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(w[:, :, i, j], xt[:, :, i : i + Ho, j : j + Wo], axes=1)
    return out.transpose(1, 0, 2, 3)


def _weight_grad(x: np.ndarray, g: np.ndarray, k: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    _, O, Ho, Wo = g.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xt = x.transpose(1, 0, 2, 3)
    gt = g.transpose(1, 0, 2, 3)
    dw = np.empty((O, C, k, k))
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.tensordot(
                gt, xt[:, :, i : i + Ho, j : j + Wo], axes=((1, 2, 3), (1, 2, 3))
            )
    return dw


def conv2d(x, weight, bias, padding: Optional[int] = None) -> Tensor:
    """Stride-1 2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is ``[B, Cin, H, W]``, ``weight`` is ``[Cout, Cin, k, k]`` and
    ``bias`` is ``[Cout]``. ``padding`` defaults to ``(k - 1) // 2`` which
    preserves the spatial size for odd ``k``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects a 4-D input and a 4-D weight")
    O, C, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[1] != C:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {C}")
    if bias.shape != (O,):
        raise ValueError(f"bias shape {bias.shape} does not match {O} output channels")
    pad = (k - 1) // 2 if padding is None else int(padding)
    xd, wd = x.data, weight.data
    out = _correlate(xd, wd, pad) + bias.data[None, :, None, None]

    def _back(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _correlate(g, flipped, k - 1 - pad)
        if weight.requires_grad:
            gw = _weight_grad(xd, g, k, pad)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _emit(out, (x, weight, bias), _back)


# ---------------------------------------------------------------- normalization


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x, gamma, beta, stats: BatchNormStats, training: bool) -> Tensor:
    """Per-channel normalization of ``[B, C, H, W]`` data.

    In training mode the batch mean and biased variance over ``(B, H, W)``
    normalize the input, and the running estimates move towards the batch mean
    and unbiased variance by ``stats.momentum``. In eval mode the running
    estimates are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ValueError("batch_norm expects a [B, C, H, W] input")
    B, C, H, W = x.shape
    n = B * H * W
    eps = stats.eps
    xd = x.data
    if training:
        if n < 2:
            raise ValueError("batch_norm in training mode needs B*H*W >= 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.running_mean = (1 - m) * stats.running_mean + m * mean
        stats.running_var = (1 - m) * stats.running_var + m * var * (n / (n - 1))
    else:
        mean, var = stats.running_mean, stats.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def _back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            gx = (
                inv_std[None, :, None, None]
                / n
                * (
                    n * gxhat
                    - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _emit(out, (x, gamma, beta), _back)


# ---------------------------------------------------------------- resampling


def max_pool2(x) -> Tensor:
    """2x2 non-overlapping max pooling.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(B, C, H, W),)

    return _emit(out, (x,), _back)


def upsample_nearest2(x) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    x = _as_tensor(x)
    B, C, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _back(g):
        return (g.reshape(B, C, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit(out, (x,), _back)


# ---------------------------------------------------------------- set / channel plumbing


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis (axis 1 of 4-D, axis 2 of 5-D tensors)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (4, 5):
        raise ValueError("concat_channels needs two 4-D or two 5-D tensors")
    axis = a.ndim - 3
    sa, sb = list(a.shape), list(b.shape)
    if sa[:axis] + sa[axis + 1 :] != sb[:axis] + sb[axis + 1 :]:
        raise ValueError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    ca = sa[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def _back(g):
        return np.split(g, [ca], axis=axis)

    return _emit(out, (a, b), _back)


def split_channels(x, first: int) -> tuple:
    """Inverse of :func:`concat_channels`: the first ``first`` channels and the rest."""
    x = _as_tensor(x)
    axis = x.ndim - 3
    C = x.shape[axis]
    if not 0 <= first <= C:
        raise ValueError(f"cannot split {C} channels at {first}")

    def part(lo, hi):
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def _back(g):
            full = np.zeros(x.shape)
            full[index] = g
            return (full,)

        return _emit(x.data[index].copy(), (x,), _back)

    return part(0, first), part(first, C)


def mean_over_set(stack) -> Tensor:
    """Arithmetic mean over the leading (support-set) axis of ``[S, ...]``."""
    stack = _as_tensor(stack)
    if stack.ndim < 1 or stack.shape[0] == 0:
        raise ValueError("mean_over_set needs a non-empty set axis")
    S = stack.shape[0]
    out = stack.data.sum(axis=0) / S

    def _back(g):
        return (np.broadcast_to(g / S, stack.shape).copy(),)

    return _emit(out, (stack,), _back)


def expand_set(x, S: int) -> Tensor:
    """Repeat ``x`` along a new leading set axis of length ``S``."""
    x = _as_tensor(x)
    if S < 1:
        raise ValueError("expand_set needs S >= 1")
    out = np.broadcast_to(x.data, (S,) + x.shape).copy()
    return _emit(out, (x,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- losses


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error. The subgradient at exact ties is 0."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)

    def _back(g):
        gp = sign * (g / n)
        return gp, -gp

    return _emit(np.array(np.abs(diff).mean()), (pred, target), _back)
