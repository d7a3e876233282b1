"""Fusion quality metrics: En, SD, MI, SSIMm, VIFm and Nabf.

Every metric works on 8-bit gray levels.  Float inputs are read as [0, 1]
intensities, clamped and quantized with round-half-up; integer inputs must
already lie in [0, 255].  Two-source metrics take ``(fused, ir, vi)``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import sobel
from scipy.signal import convolve2d

from .errors import ContractError, ShapeError
from .imageio import list_images, quantize, read_gray
from .lrrw import atomic_write_bytes

METRICS = ("En", "SD", "MI", "SSIMm", "VIFm", "Nabf")
HIGHER_IS_BETTER = {"En": True, "SD": True, "MI": True, "SSIMm": True, "VIFm": True, "Nabf": False}


def as_levels(img) -> np.ndarray:
    """``H x W`` uint8 gray levels; idempotent."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"metrics take single-channel 2-D images, got shape {a.shape}")
    if a.size == 0:
        raise ContractError("empty image")
    if np.issubdtype(a.dtype, np.integer):
        if a.min() < 0 or a.max() > 255:
            raise ContractError("integer images must hold 8-bit levels")
        return a.astype(np.uint8)
    return quantize(a)


def _float_levels(img) -> np.ndarray:
    return as_levels(img).astype(np.float64)


def _triple(fused, ir, vi):
    f, a, b = as_levels(fused), as_levels(ir), as_levels(vi)
    if not f.shape == a.shape == b.shape:
        raise ShapeError(f"image sizes differ: fused {f.shape}, ir {a.shape}, vi {b.shape}")
    return f, a, b


def _entropy_of(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


# -- single-image ----------------------------------------------------------


def entropy(img) -> float:
    """Shannon entropy in bits of the 256-bin histogram."""
    lv = as_levels(img).astype(np.intp)
    return _entropy_of(np.bincount(lv.ravel(), minlength=256))


def std_dev(img) -> float:
    """Population standard deviation of the gray levels."""
    return float(np.std(_float_levels(img)))


# -- mutual information ----------------------------------------------------


def pair_mutual_information(a, b) -> float:
    """``H(a) + H(b) - H(a, b)`` in bits from the 256 x 256 joint histogram."""
    a, b = as_levels(a).astype(np.intp).ravel(), as_levels(b).astype(np.intp).ravel()
    joint = np.bincount(a * 256 + b, minlength=256 * 256).reshape(256, 256)
    return _entropy_of(joint.sum(1)) + _entropy_of(joint.sum(0)) - _entropy_of(joint.ravel())


def mutual_information(fused, ir, vi) -> float:
    f, a, b = _triple(fused, ir, vi)
    return pair_mutual_information(f, a) + pair_mutual_information(f, b)


# -- SSIM ------------------------------------------------------------------

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2
    x = np.arange(size) - r
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y) -> float:
    """Mean SSIM over all fully covered 11 x 11 Gaussian windows (sigma 1.5, L = 255).

    Population (not sample) moments are used inside each window.
    """
    x, y = _float_levels(x), _float_levels(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WIN:
        raise ShapeError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    w = _gaussian_window(SSIM_WIN, SSIM_SIGMA)
    filt = lambda a: convolve2d(a, w, mode="valid")
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    C1, C2 = (SSIM_K1 * 255) ** 2, (SSIM_K2 * 255) ** 2
    smap = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(smap.mean())


def ssim_m(fused, ir, vi) -> float:
    f, a, b = _triple(fused, ir, vi)
    return (ssim(f, a) + ssim(f, b)) / 2


# -- VIF -------------------------------------------------------------------

VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10


def _vif_window(N: int) -> np.ndarray:
    sd = N / 5.0
    r = (N - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2 * sd * sd))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif(ref, dist) -> float:
    """Pixel-domain four-scale VIF of ``dist`` against reference ``ref``."""
    ref, dist = _float_levels(ref), _float_levels(dist)
    if ref.shape != dist.shape:
        raise ShapeError(f"vif: shapes differ {ref.shape} vs {dist.shape}")
    num = den = 0.0
    for scale in range(1, 5):
        win = _vif_window(2 ** (5 - scale) + 1)
        filt = lambda a: convolve2d(a, win, mode="valid")
        if scale > 1:
            ref, dist = filt(ref)[::2, ::2], filt(dist)[::2, ::2]
        if min(ref.shape) < win.shape[0]:
            raise ShapeError("image too small for four VIF scales")
        mu1, mu2 = filt(ref), filt(dist)
        s1 = np.maximum(filt(ref * ref) - mu1 * mu1, 0)
        s2 = np.maximum(filt(dist * dist) - mu2 * mu2, 0)
        s12 = filt(ref * dist) - mu1 * mu2

        g = s12 / (s1 + VIF_EPS)
        sv = s2 - g * s12
        low1 = s1 < VIF_EPS
        g[low1] = 0
        sv[low1] = s2[low1]
        s1[low1] = 0
        low2 = s2 < VIF_EPS
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv[sv <= VIF_EPS] = VIF_EPS

        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1 + s1 / VIF_SIGMA_NSQ))
    if den == 0:
        # featureless reference: a featureless distortion carries all of it
        return 1.0 if num == 0 else float("inf")
    return float(num / den)


def vif_m(fused, ir, vi) -> float:
    f, a, b = _triple(fused, ir, vi)
    return (vif(a, f) + vif(b, f)) / 2


# -- Nabf ------------------------------------------------------------------

NABF_TD = 2.0
NABF_WT_MIN = 0.001
NABF_L = 1.5
NABF_GAMMA_G, NABF_K_G, NABF_SIGMA_G = 0.9999, 19.0, 0.5
NABF_GAMMA_A, NABF_K_A, NABF_SIGMA_A = 0.9995, 22.0, 0.5


def _edges(img):
    gv, gh = sobel(img, axis=0), sobel(img, axis=1)
    return np.sqrt(gh * gh + gv * gv), np.arctan2(gv, gh)


def _preservation(gS, aS, gF, aF):
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(gS == 0, 0.0, np.minimum(gF, gS) / np.maximum(gF, gS))
    rel = np.nan_to_num(rel)
    ang = np.abs(np.abs(aS - aF) - np.pi / 2) * 2 / np.pi
    Qg = NABF_GAMMA_G / (1 + np.exp(-NABF_K_G * (rel - NABF_SIGMA_G)))
    Qa = NABF_GAMMA_A / (1 + np.exp(-NABF_K_A * (ang - NABF_SIGMA_A)))
    return np.sqrt(Qg * Qa)


def nabf(fused, ir, vi) -> float:
    """Fusion-artifact ratio of the gradient-based fusion-performance framework.

    Artifacts are pixels where the fused edge strength exceeds both source
    edge strengths; each contributes ``(1 - Q_AF) w_A + (1 - Q_BF) w_B``,
    normalized by the total edge weight.
    """
    f, a, b = (x.astype(np.float64) for x in _triple(fused, ir, vi))
    gA, aA = _edges(a)
    gB, aB = _edges(b)
    gF, aF = _edges(f)
    QAF = _preservation(gA, aA, gF, aF)
    QBF = _preservation(gB, aB, gF, aF)
    wA = np.where(gA >= NABF_TD, NABF_WT_MIN * gA**NABF_L, NABF_WT_MIN)
    wB = np.where(gB >= NABF_TD, NABF_WT_MIN * gB**NABF_L, NABF_WT_MIN)
    artifact = (gF > gA) & (gF > gB)
    return float(np.sum(artifact * ((1 - QAF) * wA + (1 - QBF) * wB)) / np.sum(wA + wB))


# -- report ----------------------------------------------------------------


def evaluate_triple(fused, ir, vi) -> Dict[str, float]:
    f, a, b = _triple(fused, ir, vi)
    return {
        "En": entropy(f),
        "SD": std_dev(f),
        "MI": mutual_information(f, a, b),
        "SSIMm": ssim_m(f, a, b),
        "VIFm": vif_m(f, a, b),
        "Nabf": nabf(f, a, b),
    }


@dataclass
class MetricsReport:
    rows: List[Tuple[str, Dict[str, float]]] = field(default_factory=list)

    @property
    def means(self) -> Optional[Dict[str, float]]:
        if not self.rows:
            return None
        return {m: float(np.mean([r[m] for _, r in self.rows])) for m in METRICS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name",) + METRICS)
        body = list(self.rows) + ([("mean", self.means)] if self.rows else [])
        for name, r in body:
            w.writerow([name] + [repr(r[m]) for m in METRICS])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["name"] + [m + ("↑" if HIGHER_IS_BETTER[m] else "↓") for m in METRICS]
        body = [[n] + [f"{r[m]:.5f}" for m in METRICS] for n, r in self.rows]
        if self.rows:
            body.append(["mean"] + [f"{self.means[m]:.5f}" for m in METRICS])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        return "\n".join(fmt(r) for r in [head] + body) + "\n"


def evaluate_report(fused_dir, ir_dir, vi_dir, threads: int = 1) -> MetricsReport:
    """Metrics for every ``<stem>`` present in all three directories."""
    from .trainer import match_stems

    fused, ir, vi = list_images(fused_dir), list_images(ir_dir), list_images(vi_dir)
    stems = match_stems(fused, ir, ("fused", "infrared"))
    match_stems(fused, vi, ("fused", "visible"))

    def one(stem):
        return stem, evaluate_triple(*(read_gray(d[stem]) for d in (fused, ir, vi)))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(one, stems))
    else:
        rows = [one(s) for s in stems]
    return MetricsReport(rows)


def write_report(report: MetricsReport, csv_path, text_path=None) -> None:
    atomic_write_bytes(csv_path, report.to_csv().encode())
    if text_path is not None:
        atomic_write_bytes(text_path, report.to_text().encode("utf-8"))
