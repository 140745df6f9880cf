"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small. Every primitive application whose inputs
require gradients is recorded on a global tape; ``backward`` replays the tape
in reverse (execution order is already topological) and then clears it. Tapes
are rebuilt on every forward pass; nothing is cached between passes.

All arithmetic is float64. Broadcasting is supported only where the model
substrate needs it (bias adds, mask/gate multiplies, batched matmul against
2-D weights).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "tape_size",
    "clear_tape",
    "backward",
    "forward_primitive",
    "PRIMITIVES",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "softmax",
    "mean",
    "tsum",
    "reshape",
    "transpose",
    "layer_norm",
    "cross_entropy_with_logits",
]


class Tensor:
    """A dense n-d array of float64 that can participate in autodiff."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE: list[_Node] = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.append(_Node(out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires-grad ancestor of a scalar loss.

    The tape is consumed: it is cleared afterwards even on error paths that
    occur before the walk.
    """
    if loss.data.shape != ():
        clear_tape()
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not any(node.out is loss for node in _TAPE):
        clear_tape()
        raise ValueError("loss is not on the active tape")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(_TAPE):
        g = node.out.grad
        if g is None:
            continue
        contribs = node.backward_fn(g)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None:
                continue
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
    clear_tape()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _record(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul expects 2-d or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _record(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.shape
    denom = x.size if axis is None else np.prod(
        [shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape) / denom,)

    return _record(out, (x,), bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def bw(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, (x,), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, H*W, C*kh*kw) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    b, c, h, w = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * kh * kw)


def conv2d(x, w) -> Tensor:
    """2-D cross-correlation, stride 1, zero-padded to preserve H and W.

    ``x`` is (B, C, H, W); ``w`` is (F, C, kh, kw) with odd kernel extents.
    The bias, when a layer has one, is a separate broadcast add.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d supports odd kernels only, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw)  # (B, HW, C*kh*kw)
    wmat = w.data.reshape(f, -1)
    out = Tensor((cols @ wmat.T).transpose(0, 2, 1).reshape(bsz, f, h, wd))
    xd, wd_ = x.data, w.data

    def bw(g):
        gmat = g.reshape(bsz, f, h * wd).transpose(0, 2, 1)  # (B, HW, F)
        xp_ = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols_ = _im2col(xp_, kh, kw)
        gw = np.einsum("bpf,bpk->fk", gmat, cols_).reshape(f, c, kh, kw)
        # dx is a correlation of g with the spatially flipped, channel-swapped kernel
        wflip = wd_[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, F, kh, kw)
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gcols = _im2col(gp, kh, kw)  # (B, HW, F*kh*kw)
        gx = (gcols @ wflip.reshape(c, -1).T).transpose(0, 2, 1).reshape(bsz, c, h, wd)
        return (gx, gw)

    return _record(out, (x, w), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        dxhat = g * gd
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), bw)


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of logits against integer labels.

    Accepts (B, m) logits with (B,) labels, or a single (m,) row with a
    scalar label.
    """
    logits = _as_tensor(logits)
    squeeze = logits.data.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects (B, m) logits, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz, m = z.shape
    if y.shape != (bsz,):
        raise ValueError(f"cross_entropy: {z.shape[0]} rows but labels shape {y.shape}")
    if y.min() < 0 or y.max() >= m:
        raise ValueError(f"cross_entropy: labels out of range [0, {m})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    out = Tensor(np.mean(lse - z[np.arange(bsz), y]))
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=1, keepdims=True)

    def bw(g):
        gz = probs.copy()
        gz[np.arange(bsz), y] -= 1.0
        gz *= float(g) / bsz
        return (gz[0] if squeeze else gz,)

    return _record(out, (logits,), bw)


#: op kind -> primitive, the dispatchable primitive set of the engine.
PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "softmax": softmax,
    "mean": mean,
    "sum": tsum,
    "reshape": reshape,
    "transpose": transpose,
    "layer_norm": layer_norm,
    "cross_entropy_with_logits": cross_entropy_with_logits,
}


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; unknown kinds raise ValueError."""
    try:
        op = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return op(*inputs, **kwargs)
