"""Detail-to-semantic fusion loss computed through a four-tap feature backbone.

    total = gamma1 * pixel + gamma2 * shallow + middle + gamma4 * deep

* pixel:   ||I_f - I_vi||_F^2
* shallow: ||phi1(I_f) - phi1(I_vi)||_F^2
* middle:  sum_{k=2,3} beta_k ||phi_k(I_f) - (w_ir phi_k(I_ir) + w_vi phi_k(I_vi))||_F^2
* deep:    ||gram(phi4(I_f)) - gram(phi4(I_ir))||_F^2

Two backbones are available.  ``tiny-test`` is a small bias-free network
whose weights ship with the package; ``vgg16-file`` reads the ten block 1-4
convolutions of a VGG-16 from an LRRW container (see
``docs/vgg16_conversion.md``).  Taps are taken after the last activation of
each block, before pooling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import lrrw
from .errors import ContractError, FormatError, ShapeError, SizeError

MIN_SIZE = 16  # four 2x2 pooling stages

TINY_CHANNELS = (4, 8, 16, 32)
TINY_SEED = 42

VGG_BLOCKS = (("conv1_1", "conv1_2"), ("conv2_1", "conv2_2"), ("conv3_1", "conv3_2", "conv3_3"), ("conv4_1", "conv4_2", "conv4_3"))
VGG_CHANNELS = {"conv1": 64, "conv2": 128, "conv3": 256, "conv4": 512}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
# torchvision ``vgg16().features`` indices of the thirteen convolutions we use
TORCHVISION_VGG16_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14,
    "conv4_1": 17, "conv4_2": 19, "conv4_3": 21,
}


@dataclass
class LossConfig:
    gamma1: float = 10.0
    gamma2: float = 1.5
    gamma4: float = 2000.0
    beta2: float = 0.01
    beta3: float = 0.5
    w_ir: float = 3.0
    w_vi: float = 0.5
    backbone: str = "tiny-test"
    backbone_path: Optional[str] = None

    def __post_init__(self):
        weights = (self.gamma1, self.gamma2, self.gamma4, self.beta2, self.beta3, self.w_ir, self.w_vi)
        if any(w < 0 for w in weights):
            raise ContractError("loss weights must be nonnegative")
        if not self.w_vi < self.w_ir:
            raise ContractError(f"w_vi ({self.w_vi}) must be smaller than w_ir ({self.w_ir})")
        if self.backbone not in ("tiny-test", "vgg16-file"):
            raise ContractError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "vgg16-file" and not self.backbone_path:
            raise ContractError("the vgg16-file backbone needs backbone_path")

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureTaps(NamedTuple):
    phi1: ad.Tensor
    phi2: ad.Tensor
    phi3: ad.Tensor
    phi4: ad.Tensor


def _check_size(image: ad.Tensor):
    if image.data.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"backbones take a 1 x H x W image, got {image.shape}")
    if min(image.shape[1:]) < MIN_SIZE:
        raise SizeError(f"image {image.shape[1]}x{image.shape[2]} is below the {MIN_SIZE}x{MIN_SIZE} minimum for four pooling stages")


class TinyBackbone:
    """Four (3x3 conv, ramp, 2x2 average pool) blocks with 4/8/16/32 channels, no biases."""

    name = "tiny-test"

    def __init__(self, weights):
        self.weights = [np.asarray(weights[f"conv{i + 1}"], dtype=np.float64) for i in range(4)]
        c_in = 1
        for i, (w, c) in enumerate(zip(self.weights, TINY_CHANNELS)):
            if w.shape != (c, c_in, 3, 3):
                raise FormatError(f"tiny backbone conv{i + 1}: expected {(c, c_in, 3, 3)}, got {w.shape}")
            c_in = c

    @classmethod
    def generate(cls, seed: int = TINY_SEED) -> "TinyBackbone":
        """Draw fresh He-normal weights; this is how the shipped file was made."""
        rng = np.random.default_rng(seed)
        out, c_in = {}, 1
        for i, c in enumerate(TINY_CHANNELS):
            std = np.sqrt(2.0 / (c_in * 9))
            out[f"conv{i + 1}"] = rng.normal(0.0, std, size=(c, c_in, 3, 3)).astype(np.float32)
            c_in = c
        return cls(out)

    @classmethod
    def load(cls, path=None) -> "TinyBackbone":
        if path is None:
            ref = resources.files("lrrfuse") / "data" / "tiny_backbone.lrrw"
            with resources.as_file(ref) as p:
                arrays, _ = lrrw.load(p)
        else:
            arrays, _ = lrrw.load(path)
        try:
            return cls(arrays)
        except KeyError as exc:
            raise FormatError(f"tiny backbone file lacks {exc.args[0]}") from exc

    def save(self, path):
        lrrw.save(path, {f"conv{i + 1}": w for i, w in enumerate(self.weights)}, {"kind": "tiny-backbone", "seed": TINY_SEED})

    def features(self, image) -> FeatureTaps:
        x = ad.as_tensor(image)
        _check_size(x)
        taps = []
        for i, w in enumerate(self.weights):
            x = ad.relu(ad.conv2d(x, ad.Tensor(w.astype(x.dtype, copy=False)), 1))
            taps.append(x)
            if i < 3:
                x = ad.avg_pool2(x)
        return FeatureTaps(*taps)


class VGG16Backbone:
    """Convolution blocks 1-4 of VGG-16 with biases, ramps and 2x2 max pooling.

    Gray input is replicated to three channels and normalized with the
    ImageNet per-channel mean and standard deviation.
    """

    name = "vgg16-file"

    def __init__(self, weights):
        self.layers = []
        c_in = 3
        for block in VGG_BLOCKS:
            layer_list = []
            for name in block:
                c_out = VGG_CHANNELS[name[:5]]
                try:
                    w = np.asarray(weights[f"{name}.weight"], dtype=np.float64)
                    b = np.asarray(weights[f"{name}.bias"], dtype=np.float64)
                except KeyError as exc:
                    raise FormatError(f"VGG-16 weight file lacks {exc.args[0]}") from exc
                if w.shape != (c_out, c_in, 3, 3) or b.shape != (c_out,):
                    raise FormatError(f"{name}: expected weight {(c_out, c_in, 3, 3)} and bias {(c_out,)}, got {w.shape}, {b.shape}")
                layer_list.append((w, b))
                c_in = c_out
            self.layers.append(layer_list)

    @classmethod
    def load(cls, path) -> "VGG16Backbone":
        if not Path(path).exists():
            raise FormatError(f"VGG-16 weight file not found: {path}")
        arrays, _ = lrrw.load(path)
        return cls(arrays)

    def features(self, image) -> FeatureTaps:
        x = ad.as_tensor(image)
        _check_size(x)
        x = ad.concat([x, x, x])
        x = ad.channel_affine(x, 1.0 / IMAGENET_STD, -IMAGENET_MEAN / IMAGENET_STD)
        taps = []
        for i, block in enumerate(self.layers):
            for w, b in block:
                x = ad.relu(ad.bias_add(ad.conv2d(x, ad.Tensor(w.astype(x.dtype, copy=False)), 1), ad.Tensor(b.astype(x.dtype, copy=False))))
            taps.append(x)
            if i < 3:
                x = ad.max_pool2(x)
        return FeatureTaps(*taps)


def convert_torchvision_vgg16(state_dict) -> dict:
    """Rename a torchvision ``vgg16`` state dict to LRRW tensor names.

    ``state_dict`` maps ``features.<i>.weight`` / ``features.<i>.bias`` to
    array-likes; only the ten convolutions feeding the four taps are kept.
    """
    out = {}
    for name, idx in TORCHVISION_VGG16_INDEX.items():
        for part in ("weight", "bias"):
            key = f"features.{idx}.{part}"
            if key not in state_dict:
                raise FormatError(f"state dict lacks {key}")
            val = state_dict[key]
            val = val.detach().cpu().numpy() if hasattr(val, "detach") else np.asarray(val)
            out[f"{name}.{part}"] = val.astype(np.float32)
    return out


def load_backbone(cfg: LossConfig):
    if cfg.backbone == "tiny-test":
        return TinyBackbone.load(cfg.backbone_path)
    return VGG16Backbone.load(cfg.backbone_path)


def backbone_features(image, backbone) -> FeatureTaps:
    return backbone.features(image)


# -- loss terms ------------------------------------------------------------


def _same(a: ad.Tensor, b: ad.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_pixel(I_f, I_vi) -> ad.Tensor:
    I_f, I_vi = ad.as_tensor(I_f), ad.as_tensor(I_vi)
    _same(I_f, I_vi, "pixel loss")
    return ad.sq_norm(ad.sub(I_f, I_vi))


def loss_shallow(taps_f: FeatureTaps, taps_vi: FeatureTaps) -> ad.Tensor:
    _same(taps_f[0], taps_vi[0], "shallow loss")
    return ad.sq_norm(ad.sub(taps_f[0], taps_vi[0]))


def loss_middle(taps_f: FeatureTaps, taps_ir: FeatureTaps, taps_vi: FeatureTaps, cfg: LossConfig) -> ad.Tensor:
    total = None
    for k, beta in ((1, cfg.beta2), (2, cfg.beta3)):
        _same(taps_f[k], taps_ir[k], "middle loss")
        _same(taps_f[k], taps_vi[k], "middle loss")
        target = ad.add(ad.scale(taps_ir[k], cfg.w_ir), ad.scale(taps_vi[k], cfg.w_vi))
        term = ad.scale(ad.sq_norm(ad.sub(taps_f[k], target)), beta)
        total = term if total is None else ad.add(total, term)
    return total


def loss_deep(taps_f: FeatureTaps, taps_ir: FeatureTaps) -> ad.Tensor:
    _same(taps_f[3], taps_ir[3], "deep loss")
    return ad.sq_norm(ad.sub(ad.gram(taps_f[3]), ad.gram(taps_ir[3])))


def loss_total(I_f, I_ir, I_vi, cfg: LossConfig, backbone, source_taps=None):
    """Weighted loss and its unweighted term breakdown.

    ``source_taps`` may carry precomputed ``(taps_ir, taps_vi)``; source
    images never need gradients.

    Returns
    -------
    total : Tensor
        Scalar on the tape.
    terms : dict
        Floats ``pixel``, ``shallow``, ``middle``, ``deep`` and ``total``.
    """
    I_f = ad.as_tensor(I_f)
    I_ir, I_vi = ad.as_tensor(I_ir).detach(), ad.as_tensor(I_vi).detach()
    _same(I_f, I_ir, "loss")
    _same(I_f, I_vi, "loss")
    if source_taps is None:
        source_taps = (backbone.features(I_ir), backbone.features(I_vi))
    taps_ir, taps_vi = source_taps
    taps_f = backbone.features(I_f)

    pix = loss_pixel(I_f, I_vi)
    sh = loss_shallow(taps_f, taps_vi)
    mid = loss_middle(taps_f, taps_ir, taps_vi, cfg)
    deep = loss_deep(taps_f, taps_ir)
    total = ad.add(ad.add(ad.add(ad.scale(pix, cfg.gamma1), ad.scale(sh, cfg.gamma2)), mid), ad.scale(deep, cfg.gamma4))
    terms = {
        "pixel": float(pix.data),
        "shallow": float(sh.data),
        "middle": float(mid.data),
        "deep": float(deep.data),
        "total": float(total.data),
    }
    return total, terms
