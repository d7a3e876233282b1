"""Convolutional LLRR blocks: the unrolled decomposition of one grayscale image.

One block computes

    Z_t = h_theta(C2 * (X - C1 * Z_{t-1}) + lam3_hat Z_{t-1})

and a stack starts from ``Z_0 = h_theta0(C0 * X)``.  Channels ``[0, N)`` of
``Z`` hold the low-rank coefficients and ``[N, 2N)`` the sparse ones.

Parameter containers hold plain arrays for storage and :class:`Tensor`
leaves during a differentiable forward pass; :meth:`map` converts between
the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError

LAM3_HAT_MIN = 1e-6

DEFAULT_CHANNELS = 32
DEFAULT_KERNEL = 3
DEFAULT_BLOCKS = 4
THETA_INIT = 0.01
LAM3_HAT_INIT = 0.9


def _f32(a) -> np.ndarray:
    # keep values exactly representable in the f32 container
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def init_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return _f32(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))


@dataclass
class LlrrBlockParams:
    C1: object  # 1 x 2N x k x k, synthesis
    C2: object  # 2N x 1 x k x k, analysis
    theta: object  # 2N
    lam3_hat: object  # shape (1,)

    def map(self, fn: Callable) -> "LlrrBlockParams":
        return LlrrBlockParams(fn(self.C1), fn(self.C2), fn(self.theta), fn(self.lam3_hat))

    def named(self, prefix: str = ""):
        return [(prefix + "C1", self.C1), (prefix + "C2", self.C2), (prefix + "theta", self.theta), (prefix + "lam3_hat", self.lam3_hat)]


@dataclass
class LlrrStackParams:
    C0: object  # 2N x 1 x k x k
    theta0: object  # 2N
    blocks: List[LlrrBlockParams] = field(default_factory=list)

    @property
    def N(self) -> int:
        return _shape(self.C0)[0] // 2

    @property
    def k(self) -> int:
        return _shape(self.C0)[-1]

    @property
    def T(self) -> int:
        return len(self.blocks)

    def map(self, fn: Callable) -> "LlrrStackParams":
        return LlrrStackParams(fn(self.C0), fn(self.theta0), [b.map(fn) for b in self.blocks])

    def named(self, prefix: str = ""):
        out = [(prefix + "C0", self.C0), (prefix + "theta0", self.theta0)]
        for i, b in enumerate(self.blocks):
            out.extend(b.named(f"{prefix}block{i}."))
        return out

    def validate(self):
        N, k = self.N, self.k
        if self.T < 1:
            raise ContractError("a stack needs at least one block")
        expect = {"C0": (2 * N, 1, k, k), "theta0": (2 * N,)}
        for name, val in self.named():
            key = name.split(".")[-1]
            want = expect.get(key) or {
                "C1": (1, 2 * N, k, k),
                "C2": (2 * N, 1, k, k),
                "theta": (2 * N,),
                "lam3_hat": (1,),
            }[key]
            if _shape(val) != want:
                raise ShapeError(f"{name}: expected shape {want}, got {_shape(val)}")


def _shape(v):
    return tuple(v.shape)


def init_stack(rng: np.random.Generator, N: int = DEFAULT_CHANNELS, k: int = DEFAULT_KERNEL, T: int = DEFAULT_BLOCKS) -> LlrrStackParams:
    if N < 1 or T < 1 or k < 1 or k % 2 == 0:
        raise ContractError(f"need N >= 1, T >= 1 and odd k, got N={N}, k={k}, T={T}")
    C0 = init_kernel(rng, 2 * N, 1, k)
    blocks = [
        LlrrBlockParams(
            C1=init_kernel(rng, 1, 2 * N, k),
            C2=init_kernel(rng, 2 * N, 1, k),
            theta=_f32(np.full(2 * N, THETA_INIT)),
            lam3_hat=_f32(np.array([LAM3_HAT_INIT])),
        )
        for _ in range(T)
    ]
    return LlrrStackParams(C0, _f32(np.full(2 * N, THETA_INIT)), blocks)


def substitute(p, values: dict):
    """Copy of a parameter container with the named entries in ``values`` replaced.

    Relies on ``map`` visiting entries in the same order as ``named``.
    """
    names = iter([n for n, _ in p.named()])
    return p.map(lambda a: values.get(next(names), a))


def as_leaves(p, requires_grad: bool = True):
    """Wrap every array of a parameter container in a fresh leaf tensor."""
    return p.map(lambda a: ad.Tensor(a, requires_grad=requires_grad))


def _pad(k: int) -> int:
    return (k - 1) // 2


def block_forward(Z_prev, X, p: LlrrBlockParams) -> ad.Tensor:
    """One unrolled step on ``2N x H x W`` coefficients for a ``1 x H x W`` image."""
    Z_prev, X = ad.as_tensor(Z_prev), ad.as_tensor(X)
    C1, C2, theta, lam = (ad.as_tensor(v) for v in (p.C1, p.C2, p.theta, p.lam3_hat))
    if X.data.ndim != 3 or X.shape[0] != 1:
        raise ShapeError(f"expected a 1 x H x W image, got {X.shape}")
    if Z_prev.shape[1:] != X.shape[1:] or Z_prev.shape[0] != C1.shape[1]:
        raise ShapeError(f"coefficients {Z_prev.shape} do not fit image {X.shape} and kernel {C1.shape}")
    pad = _pad(C1.shape[-1])
    resid = ad.sub(X, ad.conv2d(Z_prev, C1, pad))
    pre = ad.add(ad.conv2d(resid, C2, pad), ad.clamped_scale(Z_prev, lam, LAM3_HAT_MIN, 1.0))
    return ad.soft_threshold(pre, theta)


def stack_forward(X, p: LlrrStackParams, iterates: list | None = None) -> ad.Tensor:
    """``Z_0 = h_theta0(C0 * X)`` followed by every block in order."""
    X = ad.as_tensor(X)
    if X.data.ndim != 3 or X.shape[0] != 1:
        raise ShapeError(f"expected a 1 x H x W image, got {X.shape}")
    if not p.blocks:
        raise ContractError("a stack needs at least one block")
    C0 = ad.as_tensor(p.C0)
    Z = ad.soft_threshold(ad.conv2d(X, C0, _pad(C0.shape[-1])), ad.as_tensor(p.theta0))
    if iterates is not None:
        iterates.append(Z)
    for block in p.blocks:
        Z = block_forward(Z, X, block)
        if iterates is not None:
            iterates.append(Z)
    return Z


def split_coefficients(Z):
    Z = ad.as_tensor(Z)
    if Z.shape[0] % 2:
        raise ShapeError(f"coefficient map needs an even channel count, got {Z.shape[0]}")
    n = Z.shape[0] // 2
    return ad.channel_slice(Z, 0, n), ad.channel_slice(Z, n, 2 * n)


def split_project(Z, C_l, C_s):
    """Project the low-rank and sparse halves of ``Z`` back to image space."""
    L, S = split_coefficients(Z)
    C_l, C_s = ad.as_tensor(C_l), ad.as_tensor(C_s)
    if C_l.shape[1] != L.shape[0] or C_s.shape[1] != S.shape[0]:
        raise ShapeError(f"projection kernels {C_l.shape}, {C_s.shape} do not match {L.shape[0]} channels")
    return ad.conv2d(L, C_l, _pad(C_l.shape[-1])), ad.conv2d(S, C_s, _pad(C_s.shape[-1]))
