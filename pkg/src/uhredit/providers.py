"""Embedding and feature providers.

Neural encoders (CLIP, Inception, ...) run out of process; their outputs
arrive as EMB1 files keyed by content digest. The built-in fallbacks are
deterministic classical descriptors that capture coarse structure, which
is all the threshold logic and the closed-loop tests need.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from scipy.fft import dctn

from .formats import read_embedding
from .images import ImageTensor, resize_plane, to_grayscale


class ProviderError(RuntimeError):
    """A provider could not produce a value for the given input."""


def text_digest(text: str, algorithm: str = "md5") -> str:
    """Content digest of instruction text (UTF-8 bytes)."""
    return hashlib.new(algorithm, text.encode("utf-8")).hexdigest()


def _gray_16(img_or_plane) -> np.ndarray:
    if isinstance(img_or_plane, ImageTensor):
        plane = to_grayscale(img_or_plane).data
    else:
        plane = np.asarray(img_or_plane, dtype=np.float64)
        if plane.ndim == 3:
            plane = to_grayscale(ImageTensor(plane)).data
    return resize_plane(plane, 16, 16, box=True)


class FallbackEmbedder:
    """Classical image embedding: 16x16 box-downsampled grayscale plus the
    8x8 low-frequency block of its DCT, flattened and mean-centered (320-d).

    Centering happens before the transform, which zeroes the DCT DC
    coefficient; cosine similarity then compares structure instead of being
    swamped by global luminance.
    """

    dim = 16 * 16 + 8 * 8

    def embed_image(self, img: ImageTensor) -> np.ndarray:
        small = _gray_16(img)
        small = small - small.mean()
        coeffs = dctn(small, norm="ortho")[:8, :8]
        return np.concatenate([small.ravel(), coeffs.ravel()])

    def instruction_embedding(self, text: str) -> np.ndarray | None:
        # Text is out of reach for a pixel descriptor.
        return None


class DirectoryEmbeddingProvider:
    """EMB1 files under ``root``, named ``<digest>.emb``.

    Image keys are the digest of the image file bytes; instruction keys are
    the digest of the instruction's UTF-8 bytes.
    """

    def __init__(self, root: str | Path, algorithm: str = "md5"):
        self.root = Path(root)
        self.algorithm = algorithm

    def _lookup(self, key: str) -> np.ndarray:
        path = self.root / f"{key}.emb"
        if not path.is_file():
            raise ProviderError(f"no embedding for key {key} under {self.root}")
        return read_embedding(path)

    def embed_image(self, img: ImageTensor) -> np.ndarray:
        if img.digest is None:
            raise ProviderError("image carries no content digest")
        return self._lookup(img.digest)

    def instruction_embedding(self, text: str) -> np.ndarray | None:
        path = self.root / f"{text_digest(text, self.algorithm)}.emb"
        if not path.is_file():
            return None
        return read_embedding(path)


class FallbackPatchFeatures:
    """pFID patch descriptor: 8x8 low-frequency DCT of the 16x16
    box-downsampled grayscale patch (64-d)."""

    name = "builtin-dct"
    dim = 64

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        plane = patch
        if plane.ndim == 3:
            plane = to_grayscale(ImageTensor(plane)).data
        small = resize_plane(np.asarray(plane, dtype=np.float64), 16, 16, box=True)
        return dctn(small, norm="ortho")[:8, :8].ravel()


class DirectoryPatchFeatures:
    """EMB1 patch features keyed by the md5 of the patch's raw sample bytes."""

    def __init__(self, root: str | Path, algorithm: str = "md5"):
        self.root = Path(root)
        self.algorithm = algorithm
        self.name = f"dir:{self.root}"

    @staticmethod
    def patch_key(patch: np.ndarray, algorithm: str = "md5") -> str:
        return hashlib.new(algorithm, np.ascontiguousarray(patch).tobytes()).hexdigest()

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        path = self.root / f"{self.patch_key(patch, self.algorithm)}.emb"
        if not path.is_file():
            raise ProviderError(f"no patch features under {self.root}")
        return read_embedding(path)
