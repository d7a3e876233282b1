"""8-bit grayscale PNG/PGM reading and writing.

Internal images are float arrays in [0, 1].  Color files are converted with
Rec.601 luma weights in floating point; writing clamps to [0, 1] and
quantizes with round-half-up.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .lrrw import atomic_write_bytes

EXTENSIONS = (".png", ".pgm")
LUMA = np.array([0.299, 0.587, 0.114])


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and map to uint8 with round-half-up."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an ``H x W x 3`` or ``H x W x 4`` uint8 array, scaled to [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return arr.astype(np.float64) / 255.0
    return (arr[..., :3].astype(np.float64) @ LUMA) / 255.0


def read_gray(path, size: int | None = None) -> np.ndarray:
    """Read an image as ``H x W`` floats in [0, 1], optionally resized bilinearly to ``size x size``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "LA"):
                gray = to_gray(np.asarray(im.convert("L")))
            elif im.mode in ("RGB", "RGBA"):
                gray = to_gray(np.asarray(im))
            elif im.mode == "1":
                gray = np.asarray(im, dtype=np.float64)
            else:
                raise FormatError(f"{path}: unsupported pixel mode {im.mode} (8-bit images only)")
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if size is not None and gray.shape != (size, size):
        gray = resize(gray, size)
    return gray


def probe(path) -> None:
    """Check that ``path`` decodes as an image without reading its pixels."""
    try:
        with Image.open(path) as im:
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc


def resize(gray: np.ndarray, size: int) -> np.ndarray:
    im = Image.fromarray(np.asarray(gray, dtype=np.float32), mode="F")
    out = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def encode_gray(img, fmt: str) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(quantize(img), mode="L").save(buf, format=fmt)
    return buf.getvalue()


def write_gray(path, img) -> None:
    """Write ``H x W`` floats as an 8-bit PNG or PGM chosen by extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in EXTENSIONS:
        raise FormatError(f"{path}: output must be .png or .pgm")
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"expected a single-channel image, got shape {img.shape}")
    atomic_write_bytes(path, encode_gray(img, "PNG" if ext == ".png" else "PPM"))


def list_images(directory) -> dict:
    """Map file stem -> path for every PNG/PGM file in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.is_file() and p.suffix.lower() in EXTENSIONS}
