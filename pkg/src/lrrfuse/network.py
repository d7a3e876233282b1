"""LRRNet: two LLRR branches, four projections and two fusion convolutions.

Data flow for a visible image ``I_vi`` and an infrared image ``I_ir``::

    I_vi -> branch_vi -> (L_x, S_x) -> C11 * L_x, C12 * S_x
    I_ir -> branch_ir -> (L_y, S_y) -> C21 * L_y, C22 * S_y
    L_f = Cf1 * concat(C11 * L_x, C21 * L_y)
    S_f = Cf2 * concat(C12 * S_x, C22 * S_y)
    I_f = L_f + S_f

Concatenation order is always (visible, infrared).  No activation follows
the projection or fusion convolutions and no output clamping happens here.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import autodiff as ad
from . import lrrw
from .errors import ContractError, ManifestError, ShapeError
from .llrr import (
    DEFAULT_BLOCKS,
    DEFAULT_CHANNELS,
    DEFAULT_KERNEL,
    LlrrStackParams,
    LlrrBlockParams,
    init_kernel,
    init_stack,
    split_coefficients,
    split_project,
    stack_forward,
    substitute,
)

PARAM_BUDGET = 49_200
PROJECTIONS = ("C11", "C12", "C21", "C22")
FUSIONS = ("Cf1", "Cf2")


def config_hash(N: int, k: int, T: int) -> str:
    blob = json.dumps({"N": N, "k": k, "T": T, "arch": "lrrnet-v1"}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LrrNetParams:
    branch_vi: LlrrStackParams
    branch_ir: LlrrStackParams
    C11: object
    C12: object
    C21: object
    C22: object
    Cf1: object
    Cf2: object
    metadata: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.branch_vi.N

    @property
    def k(self) -> int:
        return self.branch_vi.k

    @property
    def T(self) -> int:
        return self.branch_vi.T

    def map(self, fn: Callable) -> "LrrNetParams":
        return LrrNetParams(
            self.branch_vi.map(fn),
            self.branch_ir.map(fn),
            *(fn(getattr(self, n)) for n in PROJECTIONS + FUSIONS),
            metadata=dict(self.metadata),
        )

    def named(self):
        out = self.branch_vi.named("branch_vi.") + self.branch_ir.named("branch_ir.")
        out += [(n, getattr(self, n)) for n in PROJECTIONS + FUSIONS]
        return out

    def substitute(self, values: dict) -> "LrrNetParams":
        """Copy with the named entries in ``values`` replaced."""
        return substitute(self, values)

    def arrays(self) -> dict:
        return {name: np.asarray(v.data if isinstance(v, ad.Tensor) else v) for name, v in self.named()}

    def validate(self):
        self.branch_vi.validate()
        self.branch_ir.validate()
        if (self.branch_ir.N, self.branch_ir.k, self.branch_ir.T) != (self.N, self.k, self.T):
            raise ShapeError("both branches must share (N, k, T)")
        N, k = self.N, self.k
        for n in PROJECTIONS:
            if tuple(getattr(self, n).shape) != (1, N, k, k):
                raise ShapeError(f"{n}: expected {(1, N, k, k)}, got {tuple(getattr(self, n).shape)}")
        for n in FUSIONS:
            if tuple(getattr(self, n).shape) != (1, 2, k, k):
                raise ShapeError(f"{n}: expected {(1, 2, k, k)}, got {tuple(getattr(self, n).shape)}")


def init_params(seed: int = 0, N: int = DEFAULT_CHANNELS, k: int = DEFAULT_KERNEL, T: int = DEFAULT_BLOCKS) -> LrrNetParams:
    """Fresh parameters drawn from ``numpy.random.default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    vi = init_stack(rng, N, k, T)
    ir = init_stack(rng, N, k, T)
    proj = [init_kernel(rng, 1, N, k) for _ in PROJECTIONS]
    fus = [init_kernel(rng, 1, 2, k) for _ in FUSIONS]
    meta = {"N": N, "k": k, "T": T, "config_hash": config_hash(N, k, T), "version": __version__}
    return LrrNetParams(vi, ir, *proj, *fus, metadata=meta)


def param_count(p: LrrNetParams) -> int:
    """Total number of trainable scalars."""
    return int(sum(np.asarray(v.data if isinstance(v, ad.Tensor) else v).size for _, v in p.named()))


def param_count_formula(N: int, k: int, T: int) -> int:
    """Closed-form count for a configuration, independent of any instance."""
    kk = k * k
    per_block = 2 * N * kk + 2 * N * kk + 2 * N + 1  # C1, C2, theta, lam3_hat
    branch = 2 * N * kk + 2 * N + T * per_block  # C0, theta0, blocks
    return 2 * branch + 4 * N * kk + 2 * 2 * kk


@dataclass
class FusionOutput:
    I_f: ad.Tensor
    L_f: ad.Tensor
    S_f: ad.Tensor
    L_x: ad.Tensor
    S_x: ad.Tensor
    L_y: ad.Tensor
    S_y: ad.Tensor
    P_lx: ad.Tensor
    P_sx: ad.Tensor
    P_ly: ad.Tensor
    P_sy: ad.Tensor


def _check_image(img: ad.Tensor, label: str):
    if img.data.ndim != 3 or img.shape[0] != 1:
        raise ShapeError(f"{label} must be a 1 x H x W map, got {img.shape}")
    if not np.isfinite(img.data).all() or img.data.min() < 0 or img.data.max() > 1:
        raise ContractError(f"{label} values must lie in [0, 1]")


def fuse_forward(I_ir, I_vi, p: LrrNetParams) -> FusionOutput:
    """Differentiable fusion of an infrared/visible pair."""
    I_ir, I_vi = ad.as_tensor(I_ir), ad.as_tensor(I_vi)
    _check_image(I_ir, "infrared image")
    _check_image(I_vi, "visible image")
    if I_ir.shape != I_vi.shape:
        raise ShapeError(f"modalities differ in shape: infrared {I_ir.shape}, visible {I_vi.shape}")

    Z_vi = stack_forward(I_vi, p.branch_vi)
    Z_ir = stack_forward(I_ir, p.branch_ir)
    L_x, S_x = split_coefficients(Z_vi)
    L_y, S_y = split_coefficients(Z_ir)
    P_lx, P_sx = split_project(Z_vi, p.C11, p.C12)
    P_ly, P_sy = split_project(Z_ir, p.C21, p.C22)

    Cf1, Cf2 = ad.as_tensor(p.Cf1), ad.as_tensor(p.Cf2)
    pad = (Cf1.shape[-1] - 1) // 2
    L_f = ad.conv2d(ad.concat([P_lx, P_ly]), Cf1, pad)
    S_f = ad.conv2d(ad.concat([P_sx, P_sy]), Cf2, pad)
    I_f = ad.add(L_f, S_f)
    return FusionOutput(I_f, L_f, S_f, L_x, S_x, L_y, S_y, P_lx, P_sx, P_ly, P_sy)


def fuse_image(I_ir: np.ndarray, I_vi: np.ndarray, p: LrrNetParams) -> np.ndarray:
    """Fused ``H x W`` array (unclamped) from two ``H x W`` arrays."""
    out = fuse_forward(np.asarray(I_ir)[None], np.asarray(I_vi)[None], p)
    return out.I_f.data[0]


# -- serialization ---------------------------------------------------------


def save_params(p: LrrNetParams, path) -> None:
    meta = dict(p.metadata)
    meta.update({"kind": "lrrnet", "N": p.N, "k": p.k, "T": p.T, "config_hash": config_hash(p.N, p.k, p.T)})
    meta.setdefault("version", __version__)
    lrrw.save(path, p.arrays(), meta)


def params_from_arrays(arrays: dict, metadata: dict) -> LrrNetParams:
    try:
        N, k, T = int(metadata["N"]), int(metadata["k"]), int(metadata["T"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError("metadata lacks the N/k/T architecture fields") from exc
    if metadata.get("kind", "lrrnet") != "lrrnet":
        raise ManifestError(f"container holds {metadata.get('kind')!r}, not lrrnet parameters")

    def stack(prefix):
        get = lambda n: arrays[prefix + n]
        blocks = [
            LlrrBlockParams(get(f"block{i}.C1"), get(f"block{i}.C2"), get(f"block{i}.theta"), get(f"block{i}.lam3_hat"))
            for i in range(T)
        ]
        return LlrrStackParams(get("C0"), get("theta0"), blocks)

    arrays = {n: np.asarray(a, dtype=np.float64) for n, a in arrays.items()}
    try:
        p = LrrNetParams(stack("branch_vi."), stack("branch_ir."), *(arrays[n] for n in PROJECTIONS + FUSIONS), metadata=dict(metadata))
    except KeyError as exc:
        raise ManifestError(f"container is missing tensor {exc.args[0]!r}") from exc
    expected = {n for n, _ in p.named()}
    extra = set(arrays) - expected
    if extra:
        raise ManifestError(f"unexpected tensors in container: {sorted(extra)}")
    try:
        p.validate()
    except ShapeError as exc:
        raise ManifestError(str(exc)) from exc
    if (p.N, p.k, p.T) != (N, k, T):
        raise ManifestError("tensor shapes disagree with the declared N/k/T")
    return p


def load_params(path) -> LrrNetParams:
    arrays, meta = lrrw.load(path)
    return params_from_arrays(arrays, meta)
