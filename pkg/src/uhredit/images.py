"""Shared raster carriers and image file I/O.

``ImageTensor`` is the pixel carrier used by every metric, loss, and
pipeline stage. Samples are either 8-bit integers or unit-interval reals;
the representation is recorded in the ``fmt`` tag so conversions happen
exactly once.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

U8 = "u8"
UNIT = "unit"

# Rec.709 luma weights for RGB -> luminance.
_LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class ImageTensor:
    """H x W x C raster with an explicit sample-format tag.

    ``digest`` and ``source_path`` are populated when the image was read
    from disk; providers keyed by content digest rely on them.
    """

    data: np.ndarray
    fmt: str = UNIT
    digest: str | None = None
    source_path: str | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected HxWxC pixel data, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ValueError("image must be at least 1x1")
        if c not in (1, 3):
            raise ValueError(f"unsupported channel count: {c}")
        if self.fmt == U8:
            arr = arr.astype(np.uint8)
        elif self.fmt == UNIT:
            arr = arr.astype(np.float64)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError("unit-format samples must lie in [0, 1]")
        else:
            raise ValueError(f"unknown sample format: {self.fmt!r}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def unit(self) -> np.ndarray:
        """Pixels as float64 in [0, 1], shape (H, W, C)."""
        if self.fmt == U8:
            return self.data.astype(np.float64) / 255.0
        return self.data

    def aspect_ratio(self) -> float:
        return max(self.height, self.width) / min(self.height, self.width)


@dataclass
class GrayImage:
    """Single-plane luminance image, unit-interval values."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected HxW luminance data, got shape {arr.shape}")
        if arr.size and (arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12):
            raise ValueError("luminance values must lie in [0, 1]")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def to_grayscale(img: ImageTensor) -> GrayImage:
    """Convert to luminance. 3-channel inputs use Rec.709 luma weights;
    1-channel inputs pass through up to sample-format normalization."""
    arr = img.unit()
    if img.channels == 1:
        return GrayImage(arr[:, :, 0])
    if img.channels == 3:
        return GrayImage(arr @ _LUMA_WEIGHTS)
    raise ValueError(f"unsupported channel count: {img.channels}")


def file_digest(path: str | Path, algorithm: str = "md5") -> str:
    """Hex digest of the file's bytes."""
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_image(path: str | Path, digest_algorithm: str | None = None) -> ImageTensor:
    """Read an 8-bit PNG/JPEG from disk.

    Raises OSError for missing or undecodable files. When
    ``digest_algorithm`` is given, the content digest is computed from the
    raw file bytes and attached to the tensor.
    """
    path = Path(path)
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"))[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"))
    digest = file_digest(path, digest_algorithm) if digest_algorithm else None
    return ImageTensor(arr, fmt=U8, digest=digest, source_path=str(path))


def save_image(img: ImageTensor, path: str | Path) -> None:
    """Write as 8-bit PNG/JPEG (format chosen from the file suffix)."""
    arr = img.data if img.fmt == U8 else np.round(img.unit() * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path)


def resize_plane(plane: np.ndarray, height: int, width: int, box: bool = False) -> np.ndarray:
    """Resample a float 2-D plane to (height, width).

    Box filtering (area average) for downscaling, bilinear otherwise.
    """
    im = Image.fromarray(plane.astype(np.float32), mode="F")
    filt = Image.BOX if box else Image.BILINEAR
    out = im.resize((width, height), resample=filt)
    return np.asarray(out, dtype=np.float64)
