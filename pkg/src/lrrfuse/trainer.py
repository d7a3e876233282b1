"""Training LRRNet parameters on paired infrared/visible images.

Each iteration draws a batch from a seeded per-epoch shuffle, runs the
forward and backward pass for every batch member (optionally on a thread
pool), averages the gradients in a fixed order and takes one optimizer
step.  The loss trace and all checkpoints are fully determined by the seed,
the configuration and the data.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from . import network as net
from .errors import ContractError, GradientError, PairingError, ShapeError
from .imageio import list_images, probe, read_gray
from .lrrw import atomic_write_bytes
from .loss import LossConfig, load_backbone, loss_total

TRACE_FIELDS = ("iter", "pixel", "shallow", "middle", "deep", "total")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 4
    batch_size: int = 8
    image_size: int = 128
    optimizer: str = "adam"  # or "sgd" for plain gradient descent
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_iterations: Optional[int] = None
    checkpoint_every: int = 0  # iterations; 0 disables
    dtype: str = "float64"
    N: int = net.DEFAULT_CHANNELS
    k: int = net.DEFAULT_KERNEL
    T: int = net.DEFAULT_BLOCKS
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ContractError(f"learning_rate must be finite and nonnegative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        if self.image_size < 16 or self.image_size % 16:
            raise ContractError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ContractError("max_iterations must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        """Build from a flat mapping holding TrainConfig and LossConfig field names."""
        own = {f.name for f in fields(cls)} - {"loss"}
        loss_names = {f.name for f in fields(LossConfig)}
        unknown = set(values) - own - loss_names
        if unknown:
            raise ContractError(f"unknown configuration keys: {sorted(unknown)}")
        loss = LossConfig(**{k: v for k, v in values.items() if k in loss_names})
        return cls(loss=loss, **{k: v for k, v in values.items() if k in own})


# -- data ------------------------------------------------------------------


class PairedDataset:
    """Infrared/visible file pairs matched by stem, decoded on access."""

    def __init__(self, pairs: Sequence[tuple], image_size: int):
        self.pairs = list(pairs)
        self.image_size = image_size

    @property
    def names(self) -> List[str]:
        return [Path(ir).stem for ir, _ in self.pairs]

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        ir, vi = self.pairs[i]
        return read_gray(ir, self.image_size)[None], read_gray(vi, self.image_size)[None]


class ArrayDataset:
    """In-memory pairs of ``1 x H x W`` arrays."""

    def __init__(self, ir: Sequence[np.ndarray], vi: Sequence[np.ndarray], names=None):
        if len(ir) != len(vi):
            raise PairingError("infrared and visible lists differ in length", [])
        self.ir, self.vi = list(ir), list(vi)
        self.names = list(names) if names is not None else [f"{i:04d}" for i in range(len(ir))]

    def __len__(self):
        return len(self.ir)

    def __getitem__(self, i):
        return self.ir[i], self.vi[i]


def match_stems(a: dict, b: dict, labels=("infrared", "visible")) -> List[str]:
    """Sorted common stems; raise PairingError naming every unmatched one."""
    only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
    if only_a or only_b:
        parts = []
        if only_a:
            parts.append(f"only in {labels[0]}: {', '.join(only_a)}")
        if only_b:
            parts.append(f"only in {labels[1]}: {', '.join(only_b)}")
        raise PairingError("unmatched file stems (" + "; ".join(parts) + ")", only_a + only_b)
    return sorted(a)


def load_dataset(ir_dir, vi_dir, image_size: int) -> PairedDataset:
    ir, vi = list_images(ir_dir), list_images(vi_dir)
    stems = match_stems(ir, vi)
    for s in stems:
        probe(ir[s])
        probe(vi[s])
    return PairedDataset([(ir[s], vi[s]) for s in stems], image_size)


def synthetic_pair(rng: np.random.Generator, size: int = 64):
    """One infrared/visible pair sharing scene layout.

    The shared scene is a few smooth rectangles.  The visible image keeps
    the scene bright and adds fine oriented texture; the infrared image dims
    the scene and adds hot Gaussian blobs.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    scene = np.full((size, size), rng.uniform(0.2, 0.4))
    for _ in range(rng.integers(2, 5)):
        y0, x0 = rng.uniform(0, 0.7, 2)
        h, w = rng.uniform(0.15, 0.5, 2)
        scene[(yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)] = rng.uniform(0.1, 0.9)
    scene = gaussian_filter(scene, 1.0)

    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(8, 20)
    texture = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    vi = 0.85 * scene + 0.08 * texture + 0.02 * rng.normal(size=scene.shape)

    ir = 0.35 * scene
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        r = rng.uniform(0.04, 0.12)
        ir += rng.uniform(0.4, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    ir += 0.02 * rng.normal(size=scene.shape)
    return np.clip(ir, 0, 1)[None], np.clip(vi, 0, 1)[None]


def synthetic_dataset(n: int, size: int = 64, seed: int = 0) -> ArrayDataset:
    rng = np.random.default_rng(seed)
    pairs = [synthetic_pair(rng, size) for _ in range(n)]
    return ArrayDataset([p[0] for p in pairs], [p[1] for p in pairs])


# -- optimization ----------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """One update of ``params`` (name -> array); returns ``(new_params, state)``.

    ``adam`` is the adaptive-moment rule with bias correction; ``sgd`` is
    ``p - lr * g``.  The input dictionaries are not modified.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} does not match {np.shape(params[name])}")
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient for {name}", name)
    lr = cfg.learning_rate
    state.step += 1
    out = {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        if cfg.optimizer == "sgd":
            out[name] = p - lr * g
            continue
        m = cfg.adam_beta1 * state.m.get(name, 0.0) + (1 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * state.v.get(name, 0.0) + (1 - cfg.adam_beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - cfg.adam_beta1**state.step)
        v_hat = v / (1 - cfg.adam_beta2**state.step)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return out, state


# -- training loop ---------------------------------------------------------


def _sample(params: net.LrrNetParams, ir, vi, cfg: TrainConfig, backbone):
    dtype = DTYPES[cfg.dtype]
    leaves = params.map(lambda a: ad.Tensor(np.asarray(a, dtype=dtype), requires_grad=True))
    ir, vi = np.asarray(ir, dtype=dtype), np.asarray(vi, dtype=dtype)
    out = net.fuse_forward(ir, vi, leaves)
    total, terms = loss_total(out.I_f, ir, vi, cfg.loss, backbone)
    ad.backward(total, [leaf for _, leaf in leaves.named()])
    return [leaf.grad for _, leaf in leaves.named()], terms


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train(
    cfg: TrainConfig,
    dataset,
    initial_params: net.LrrNetParams,
    checkpoint_dir=None,
    threads: Optional[int] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
    backbone=None,
):
    """Train and return ``(final_params, trace)``.

    ``trace`` holds one dict per optimizer step with the batch-mean loss
    terms measured before that step.  Checkpoints (when
    ``cfg.checkpoint_every`` > 0) go to ``checkpoint_dir`` as
    ``checkpoint_<iter>.lrrw``; a failed checkpoint write aborts training.
    """
    if len(dataset) == 0:
        raise ContractError("training needs a nonempty dataset")
    if cfg.checkpoint_every and checkpoint_dir is None:
        raise ContractError("checkpoint_every is set but no checkpoint directory was given")
    initial_params.validate()
    backbone = backbone or load_backbone(cfg.loss)
    rng = np.random.default_rng(cfg.seed)
    names = [n for n, _ in initial_params.named()]
    values = {n: np.asarray(a, dtype=np.float64) for n, a in initial_params.arrays().items()}
    state = OptimizerState()
    trace: List[dict] = []
    threads = threads or os.cpu_count() or 1
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    limit = cfg.max_iterations if cfg.max_iterations is not None else cfg.epochs * iterations_per_epoch(len(dataset), cfg.batch_size)

    def current():
        return initial_params.substitute(values)

    try:
        it = 0
        while it < limit:
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), cfg.batch_size):
                if it >= limit:
                    break
                batch = [dataset[int(i)] for i in order[start : start + cfg.batch_size]]
                p = current()
                work = lambda pair: _sample(p, pair[0], pair[1], cfg, backbone)
                results = list(pool.map(work, batch)) if pool else [work(b) for b in batch]

                grads = {n: np.zeros_like(values[n]) for n in names}
                sums = dict.fromkeys(TRACE_FIELDS[1:], 0.0)
                for g_list, terms in results:  # fixed order keeps the reduction deterministic
                    for n, g in zip(names, g_list):
                        grads[n] += g
                    for key in sums:
                        sums[key] += terms[key]
                B = len(results)
                grads = {n: g / B for n, g in grads.items()}
                row = {"iter": it, **{k: v / B for k, v in sums.items()}}
                trace.append(row)
                if not math.isfinite(row["total"]):
                    raise GradientError(f"loss became non-finite at iteration {it}", "total")

                values, state = optimizer_step(values, grads, state, cfg)
                it += 1
                if on_iteration:
                    on_iteration(row)
                if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    save_checkpoint(current(), Path(checkpoint_dir) / f"checkpoint_{it:06d}.lrrw", it, cfg)
    finally:
        if pool:
            pool.shutdown()
    return current(), trace


def save_checkpoint(params: net.LrrNetParams, path, iteration: int, cfg: TrainConfig):
    params = net.LrrNetParams(*(getattr(params, f.name) for f in fields(params) if f.name != "metadata"), metadata=dict(params.metadata, iteration=iteration, seed=cfg.seed))
    net.save_params(params, path)


def trace_csv(trace: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for row in trace:
        w.writerow([row["iter"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])
    return buf.getvalue()


def write_trace(path, trace: List[dict]) -> None:
    atomic_write_bytes(path, trace_csv(trace).encode())


def read_trace(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iter": int(r["iter"]), **{k: float(r[k]) for k in TRACE_FIELDS[1:]}} for r in rows]


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.convolve(values, np.ones(window) / window, mode="valid")
