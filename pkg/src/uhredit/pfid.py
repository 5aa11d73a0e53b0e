"""Patch-level Fréchet distance between real and generated image sets.

Patches are cut from both sides, embedded by a feature provider, and the
score is the Fréchet distance between the two fitted feature Gaussians.
The covariance square root goes through the symmetrized PSD form
(S1^{1/2} S2 S1^{1/2})^{1/2}, which keeps the whole computation inside
symmetric eigendecompositions.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .images import ImageTensor
from .providers import FallbackPatchFeatures

__all__ = [
    "PatchConfig",
    "GaussianStats",
    "RunningGaussian",
    "extract_patches",
    "gaussian_stats",
    "matrix_sqrt_psd",
    "frechet_distance",
    "pfid_from_features",
    "pfid",
    "PfidReport",
]


@dataclass
class PatchConfig:
    patch_size: int = 512
    stride: int = 512
    max_patches_per_image: int = 64
    sampling: str = "raster"  # raster | random
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.max_patches_per_image < 1:
            raise ValueError("max_patches_per_image must be >= 1")
        if self.sampling not in ("raster", "random"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError("covariance shape does not match the mean")
        if self.count < 2:
            raise ValueError("need at least 2 samples")
        if np.abs(self.covariance - self.covariance.T).max() > 1e-9:
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.size


def extract_patches(img: ImageTensor, cfg: PatchConfig) -> list[np.ndarray]:
    """Cut patches as unit-interval HxWxC arrays.

    Raster mode walks all top-left anchors on the stride grid in row-major
    order; random mode draws seeded uniform anchors without replacement.
    Both are capped at ``max_patches_per_image`` and deterministic for a
    fixed seed.
    """
    h, w = img.height, img.width
    p = cfg.patch_size
    if p > min(h, w):
        raise ValueError(f"patch {p} larger than image {h}x{w}")
    unit = img.unit()
    if cfg.sampling == "raster":
        anchors = [
            (y, x)
            for y in range(0, h - p + 1, cfg.stride)
            for x in range(0, w - p + 1, cfg.stride)
        ][: cfg.max_patches_per_image]
    else:
        rng = np.random.default_rng(cfg.seed)
        rows = h - p + 1
        cols = w - p + 1
        total = rows * cols
        want = min(cfg.max_patches_per_image, total)
        chosen: set[int] = set()
        ordered: list[int] = []
        while len(ordered) < want:
            idx = int(rng.integers(0, total))
            if idx not in chosen:
                chosen.add(idx)
                ordered.append(idx)
        anchors = [(idx // cols, idx % cols) for idx in ordered]
    return [unit[y : y + p, x : x + p] for y, x in anchors]


class RunningGaussian:
    """Order-insensitive mean/covariance accumulator.

    ``merge`` is associative (pairwise combination of first and second
    moments), so parallel reductions land on the same statistics up to
    floating-point reassociation.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def add(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {vec.size}")
        self.count += 1
        delta = vec - self._mean
        self._mean += delta / self.count
        self._m2 += np.outer(delta, vec - self._mean)

    def merge(self, other: "RunningGaussian") -> "RunningGaussian":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self._mean = other._mean.copy()
            self._m2 = other._m2.copy()
            return self
        total = self.count + other.count
        delta = other._mean - self._mean
        self._m2 = self._m2 + other._m2 + np.outer(delta, delta) * (
            self.count * other.count / total
        )
        self._mean = self._mean + delta * (other.count / total)
        self.count = total
        return self

    def finalize(self) -> GaussianStats:
        if self.count < 2:
            raise ValueError("need at least 2 samples")
        cov = self._m2 / (self.count - 1)
        cov = 0.5 * (cov + cov.T)
        return GaussianStats(self._mean.copy(), cov, self.count)


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of equal-dimension vectors."""
    mat = np.asarray(list(features), dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors of equal dimension")
    mean = mat.mean(axis=0)
    cov = np.cov(mat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean, cov, mat.shape[0])


def matrix_sqrt_psd(m: np.ndarray, sym_tol: float = 1e-8, neg_tol: float = 1e-10) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues within ``neg_tol`` of zero are clipped; substantially
    negative spectra are rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -neg_tol * scale:
        raise ValueError(f"matrix is not PSD: min eigenvalue {vals.min():g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2});
    tiny negative numerical residue is clipped to zero.
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    diff = a.mean - b.mean
    root_a = matrix_sqrt_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    value = float(
        diff @ diff
        + np.trace(a.covariance)
        + np.trace(b.covariance)
        - 2.0 * np.trace(cross)
    )
    return max(value, 0.0)


def pfid_from_features(real_features, generated_features) -> float:
    """Fréchet distance between feature clouds, bypassing patch extraction."""
    return frechet_distance(gaussian_stats(real_features), gaussian_stats(generated_features))


@dataclass
class PfidReport:
    score: float
    real_patches: int
    generated_patches: int
    feature_dim: int
    provider: str
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _side_stats(images, feature_fn, cfg: PatchConfig) -> tuple[GaussianStats, int]:
    acc: RunningGaussian | None = None
    patches = 0
    for img in images:
        local: RunningGaussian | None = None
        for patch in extract_patches(img, cfg):
            vec = np.asarray(feature_fn(patch), dtype=np.float64).ravel()
            if local is None:
                local = RunningGaussian(vec.size)
            local.add(vec)
            patches += 1
        if local is not None:
            acc = local if acc is None else acc.merge(local)
    if acc is None or acc.count < acc.dim + 1:
        need = "no patches" if acc is None else f"{acc.count} patches for dim {acc.dim}"
        raise ValueError(f"insufficient patches to fit a covariance ({need})")
    return acc.finalize(), patches


def pfid(
    real_images,
    generated_images,
    feature_fn=None,
    cfg: PatchConfig | None = None,
) -> PfidReport:
    """Patch-FID between two image sets.

    ``feature_fn`` maps a unit-interval patch array to a feature vector;
    the default is the built-in DCT descriptor. Requires enough patches per
    side for an invertible-enough covariance (dim + 1).
    """
    cfg = cfg or PatchConfig()
    feature_fn = feature_fn or FallbackPatchFeatures()
    real = list(real_images)
    gen = list(generated_images)
    if not real or not gen:
        raise ValueError("both image sets must be nonempty")
    stats_real, n_real = _side_stats(real, feature_fn, cfg)
    stats_gen, n_gen = _side_stats(gen, feature_fn, cfg)
    score = frechet_distance(stats_real, stats_gen)
    return PfidReport(
        score=score,
        real_patches=n_real,
        generated_patches=n_gen,
        feature_dim=stats_real.dim,
        provider=getattr(feature_fn, "name", type(feature_fn).__name__),
        config=asdict(cfg),
    )
