"""Finite-difference audit of every differentiable operation in the library.

Each check reports the worst relative error between tape gradients and
central differences together with the closest approach to a kink
(shrinkage threshold, ramp origin, pooling tie) seen while evaluating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from . import llrr
from . import network as net
from .loss import LossConfig, TinyBackbone, loss_total

TOLERANCE = 1e-5
EPS = 1e-6
MIN_MARGIN = 10 * EPS


@dataclass
class CheckResult:
    op: str
    error: float
    margin: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE and self.margin >= MIN_MARGIN


def _faulty(f: Callable) -> Callable:
    """Same function, but its tape gradient is scaled by 1.001."""

    def g(x):
        out = f(x)
        real = out._backward
        if real is not None:
            out._backward = lambda grad: tuple(None if v is None else v * 1.001 for v in real(grad))
        return out

    return g


def _check(op: str, f: Callable, point: np.ndarray, inject_fault: bool) -> CheckResult:
    with ad.record_margins() as rec:
        f(ad.Tensor(np.array(point, dtype=np.float64)))
    fn = _faulty(f) if inject_fault else f
    return CheckResult(op, ad.finite_diff_check(fn, point, EPS), rec.min_margin)


def _shrink_thresholds(rng, pre: np.ndarray, low=0.05, high=0.6) -> np.ndarray:
    """Per-channel thresholds placed strictly between sorted magnitudes."""
    th = []
    for ch in np.abs(pre).reshape(pre.shape[0], -1):
        s = np.sort(ch)
        gaps = np.diff(s)
        lo, hi = int(len(s) * low), max(int(len(s) * high), int(len(s) * low) + 1)
        i = lo + int(np.argmax(gaps[lo:hi]))
        th.append(0.5 * (s[i] + s[i + 1]))
    return np.array(th)


def composite_inputs(seed: int, N: int = 2, k: int = 3, T: int = 2, size: int = 16):
    rng = np.random.default_rng(seed)
    params = net.init_params(seed, N=N, k=k, T=T)
    ir = rng.uniform(0.0, 1.0, (1, size, size))
    vi = rng.uniform(0.0, 1.0, (1, size, size))
    return params, ir, vi


def composite_loss_fn(params, ir, vi, name, cfg=None, backbone=None):
    """Scalar loss as a function of one named parameter of ``params``."""
    cfg = cfg or LossConfig()
    backbone = backbone or TinyBackbone.load()
    taps = (backbone.features(ad.Tensor(ir)), backbone.features(ad.Tensor(vi)))

    def f(t):
        out = net.fuse_forward(ir, vi, params.substitute({name: t}))
        return loss_total(out.I_f, ir, vi, cfg, backbone, source_taps=taps)[0]

    return f


def _attempt(seed: int, inject_fault: bool) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []

    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    res.append(_check("conv2d/input", lambda t: ad.sq_norm(ad.conv2d(t, ad.Tensor(w), 1)), x, inject_fault))
    res.append(_check("conv2d/kernel", lambda t: ad.sq_norm(ad.conv2d(ad.Tensor(x), t, 1)), w, inject_fault))

    th = _shrink_thresholds(rng, x)
    res.append(_check("soft_threshold/input", lambda t: ad.sq_norm(ad.soft_threshold(t, ad.Tensor(th))), x, inject_fault))
    res.append(_check("soft_threshold/theta", lambda t: ad.sq_norm(ad.soft_threshold(ad.Tensor(x), t)), th, inject_fault))

    feats = rng.normal(size=(3, 4, 4))
    res.append(_check("gram", lambda t: ad.sq_norm(ad.gram(t)), feats, inject_fault))
    res.append(_check("relu", lambda t: ad.sq_norm(ad.relu(t)), feats, inject_fault))
    res.append(_check("avg_pool2", lambda t: ad.sq_norm(ad.avg_pool2(t)), feats, inject_fault))
    res.append(_check("max_pool2", lambda t: ad.sq_norm(ad.max_pool2(t)), feats, inject_fault))

    stack = llrr.init_stack(rng, N=2, k=3, T=2)
    img = rng.uniform(0, 1, (1, 8, 8))
    for name, val in stack.named():
        f = lambda t, name=name: ad.sq_norm(llrr.stack_forward(img, llrr.substitute(stack, {name: t})))
        res.append(_check(f"stack_forward/{name}", f, np.asarray(val), inject_fault))

    Z = rng.normal(size=(4, 6, 6))
    C_l, C_s = rng.normal(size=(2, 1, 2, 3, 3))
    res.append(_check("split_project/Z", lambda t: ad.sq_norm(ad.add(*llrr.split_project(t, C_l, C_s))), Z, inject_fault))

    params, ir, vi = composite_inputs(seed)
    backbone = TinyBackbone.load()
    cfg = LossConfig()
    for name, val in params.named():
        f = composite_loss_fn(params, ir, vi, name, cfg, backbone)
        res.append(_check(f"fuse+loss/{name}", f, np.asarray(val), inject_fault))

    I_f = rng.uniform(0, 1, (1, 16, 16))
    res.append(_check("loss_total/I_f", lambda t: loss_total(t, ir, vi, cfg, backbone)[0], I_f, inject_fault))
    return res


def run_suite(seed: int = 0, inject_fault: bool = False, max_attempts: int = 8) -> List[CheckResult]:
    """Run every check; redraw random points (seed, seed+1000, ...) if a point sits on a kink.

    Only kink proximity triggers a redraw; a gradient error at a point with a
    healthy margin is reported as is.
    """
    results = []
    for attempt in range(max_attempts):
        results = _attempt(seed + 1000 * attempt, inject_fault)
        if all(r.margin >= MIN_MARGIN for r in results):
            return results
    return results


def summarize(results: List[CheckResult]) -> Dict[str, CheckResult]:
    """Worst result per operation family (text before the first slash)."""
    worst: Dict[str, CheckResult] = {}
    for r in results:
        fam = r.op.split("/")[0]
        cur = worst.get(fam)
        if cur is None or (r.error, -r.margin) > (cur.error, -cur.margin):
            worst[fam] = r
    return worst
