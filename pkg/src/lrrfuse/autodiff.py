"""Minimal dense tensor with reverse-mode gradients.

Only the operations the fusion model and its losses need are provided.
There is no general broadcasting: per-channel parameters (thresholds, biases)
have dedicated ops, and elementwise binary ops require identical shapes.

Every op that touches a tensor requiring gradients records a node carrying a
monotonically increasing creation index.  :func:`backward` replays the nodes
reachable from the seed in reverse creation order, which is a valid reverse
topological order because a node is always created after its parents.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "as_tensor",
    "backward",
    "conv2d",
    "soft_threshold",
    "gram",
    "relu",
    "avg_pool2",
    "max_pool2",
    "bias_add",
    "channel_affine",
    "clamped_scale",
    "concat",
    "channel_slice",
    "add",
    "sub",
    "mul",
    "scale",
    "total",
    "sq_norm",
    "matmul",
    "finite_diff_check",
    "record_margins",
]

_creation_counter = itertools.count()
_margin_recorder: contextvars.ContextVar = contextvars.ContextVar("margin_recorder", default=None)

MAX_AXES = 4


class Tensor:
    """Dense real array with an optional gradient accumulator.

    Parameters
    ----------
    data : array_like
        Values.  Float arrays keep their dtype; anything else becomes float64.
    requires_grad : bool
        Leaves with ``requires_grad=True`` receive ``.grad`` after
        :func:`backward`.
    name : str, optional
        Used in diagnostics only.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensors carry at most {MAX_AXES} axes, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_creation_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered view of the operation records reachable from a seed.

    The engine does not need an explicit tape object to run; this class
    exposes the replay order for inspection and tests.
    """

    def __init__(self, seed: Tensor):
        self.seed = seed
        self.nodes = _reachable(seed)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def replay_order(self) -> list:
        return sorted(self.nodes, key=lambda n: n._id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _reachable(seed: Tensor) -> list:
    seen = {}
    stack = [seed]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return list(seen.values())


def backward(seed: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Accumulate d(seed)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves`` lists extra tensors whose ``.grad`` should be initialized to
    zeros even if the seed does not depend on them.
    """
    if seed.data.size != 1:
        raise ContractError(f"backward seed must be a scalar, got shape {seed.shape}")
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if not seed.requires_grad:
        return

    nodes = sorted(_reachable(seed), key=lambda n: n._id, reverse=True)
    grads = {id(seed): np.ones_like(seed.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if g is not None:
                node.grad = node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- margins ---------------------------------------------------------------


class MarginRecord:
    """Smallest distance to a nondifferentiable point seen by recorded ops."""

    def __init__(self):
        self.shrinkage = np.inf
        self.ramp = np.inf
        self.pool_tie = np.inf

    @property
    def min_margin(self) -> float:
        return min(self.shrinkage, self.ramp, self.pool_tie)

    def _update(self, kind: str, value: float):
        setattr(self, kind, min(getattr(self, kind), float(value)))


@contextlib.contextmanager
def record_margins():
    """Record how close every shrinkage, ramp and max-pool got to its kink."""
    rec = MarginRecord()
    token = _margin_recorder.set(rec)
    try:
        yield rec
    finally:
        _margin_recorder.reset(token)


def _note(kind: str, values: np.ndarray):
    rec = _margin_recorder.get()
    if rec is not None and values.size:
        rec._update(kind, np.min(values))


# -- elementwise -----------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant real."""
    return _make(x.data * c, (x,), lambda g: (g * c,))


def clamped_scale(x: Tensor, s: Tensor, lo: float, hi: float) -> Tensor:
    """``clip(s, lo, hi) * x`` for a learnable scalar ``s``.

    The clip passes gradient through inside ``[lo, hi]`` and blocks it outside.
    """
    if s.data.size != 1:
        raise ShapeError(f"clamped_scale expects a scalar factor, got {s.shape}")
    raw = s.data.reshape(())
    c = np.clip(raw, lo, hi)
    inside = lo <= raw <= hi

    def grad_fn(g):
        gs = np.sum(g * x.data) if inside else 0.0
        return g * c, np.full(s.shape, gs, dtype=s.dtype)

    return _make(x.data * c, (x, s), grad_fn)


def total(x: Tensor) -> Tensor:
    """Sum of all entries."""
    return _make(np.sum(x.data).reshape(()), (x,), lambda g: (np.full_like(x.data, g),))


def sq_norm(x: Tensor) -> Tensor:
    """Squared Frobenius norm."""
    return _make(np.sum(x.data * x.data).reshape(()), (x,), lambda g: (2.0 * g * x.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    _note("ramp", np.abs(x.data))
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- per-channel -----------------------------------------------------------


def _per_channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reshape a length-C vector to broadcast over axis 0 of ``x``."""
    return v.reshape((-1,) + (1,) * (x.ndim - 1))


def soft_threshold(x: Tensor, theta: Tensor) -> Tensor:
    """Shrinkage ``sign(x) * max(|x| - theta, 0)`` with one threshold per channel.

    ``theta`` is clamped to be nonnegative at use.  At ``|x| == theta`` the
    derivative is taken to be 0.
    """
    x, theta = as_tensor(x), as_tensor(theta)
    if theta.data.ndim != 1 or theta.shape[0] != x.shape[0]:
        raise ShapeError(f"soft_threshold: need {x.shape[0]} thresholds, got shape {theta.shape}")
    th = _per_channel(np.maximum(theta.data, 0.0), x.data)
    mag = np.abs(x.data) - th
    _note("shrinkage", np.abs(mag))
    active = mag > 0
    sgn = np.sign(x.data)
    out = np.where(active, sgn * mag, 0.0).astype(x.dtype)
    passes = theta.data >= 0

    def grad_fn(g):
        gx = g * active
        axes = tuple(range(1, x.data.ndim))
        gth = -np.sum(g * sgn * active, axis=axes) * passes
        return gx, gth.astype(theta.dtype)

    return _make(out, (x, theta), grad_fn)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"bias_add: need {x.shape[0]} biases, got shape {b.shape}")
    axes = tuple(range(1, x.data.ndim))
    return _make(x.data + _per_channel(b.data, x.data), (x, b), lambda g: (g, np.sum(g, axis=axes)))


def channel_affine(x: Tensor, mult: np.ndarray, shift: np.ndarray) -> Tensor:
    """``x[c] * mult[c] + shift[c]`` with constant per-channel coefficients."""
    m = _per_channel(np.asarray(mult, dtype=x.dtype), x.data)
    s = _per_channel(np.asarray(shift, dtype=x.dtype), x.data)
    return _make(x.data * m + s, (x,), lambda g: (g * m,))


# -- structure -------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i in range(len(parts)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, grad_fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop].copy(), (x,), grad_fn)


# -- convolution -----------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    # (C, k, k, H', W') -> (C*k*k, H'*W')
    win = sliding_window_view(xp, (out_h, out_w), axis=(1, 2))
    return win.reshape(xp.shape[0] * k * k, out_h * out_w)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding and no bias.

    Parameters
    ----------
    x : Tensor
        ``C_in x H x W`` map.
    w : Tensor
        ``C_out x C_in x k x k`` kernel.
    padding : int
        Zero rows/columns added on every side; ``(k - 1) // 2`` keeps the size.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 3-axis map and 4-axis kernel, got {x.shape}, {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d: kernel expects {c_in} input channels, map has {x.shape[0]}")
    if kh != kw:
        raise ShapeError(f"conv2d: square kernels only, got {kh}x{kw}")
    k = kh
    _, h, wd = x.shape
    out_h, out_w = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded map {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, out_h, out_w)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, out_h, out_w)

    def grad_fn(g):
        gmat = g.reshape(c_out, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (wmat.T @ gmat).reshape(c_in, k, k, out_h, out_w)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + out_h, j : j + out_w] += gcols[:, i, j]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding]
        return gxp, gw

    return _make(np.ascontiguousarray(out), (x, w), grad_fn)


# -- pooling ---------------------------------------------------------------


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; a trailing odd row/column is dropped."""
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    core = x.data[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    out = core.mean(axis=(2, 4))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (full,)

    return _make(out, (x,), grad_fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x.data[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if _margin_recorder.get() is not None:
        srt = np.sort(blocks, axis=-1)
        _note("pool_tie", srt[..., -1] - srt[..., -2])

    def grad_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        full = np.zeros_like(x.data)
        full[:, : 2 * h2, : 2 * w2] = gb.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        return (full,)

    return _make(out, (x,), grad_fn)


# -- statistics ------------------------------------------------------------


def gram(x: Tensor) -> Tensor:
    """Channel Gram matrix ``F F^T / (H W)`` of a ``C x H x W`` map.

    No channel means are subtracted.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"gram expects C x H x W features, got {x.shape}")
    c = x.shape[0]
    hw = x.shape[1] * x.shape[2]
    f = x.data.reshape(c, hw)
    out = (f @ f.T) / hw

    def grad_fn(g):
        return (((g + g.T) @ f) / hw).reshape(x.shape),

    return _make(out, (x,), grad_fn)


# -- gradient checking -----------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor.  The relative error of entry ``i``
    is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf), leaves=[leaf])
    analytic = leaf.grad.reshape(-1)

    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(base.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = old - eps
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = old
        numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
