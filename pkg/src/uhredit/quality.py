"""Single-image quality measurements and the pass/fail verdict.

Everything here is a pure function of pixels: Sobel-based sharpness,
exposure statistics, HSV saturation statistics, and GLCM texture features.
``assess_quality`` composes them against a ``QualityThresholds``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .images import GrayImage, ImageTensor, to_grayscale

__all__ = [
    "QualityThresholds",
    "TextureFeatures",
    "QualityVerdict",
    "tenengrad",
    "exposure_stats",
    "saturation_stats",
    "glcm_matrix",
    "glcm_features",
    "measure_image",
    "assess_quality",
]

DEFAULT_GLCM_LEVELS = 16
DEFAULT_GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))

# Stable measurement-name contract consumed by the pipeline.
MEASUREMENT_NAMES = (
    "tenengrad",
    "mean_luminance",
    "mean_saturation",
    "glcm_contrast",
    "glcm_energy",
    "glcm_homogeneity",
    "glcm_entropy",
    "aspect_ratio",
)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass
class TextureFeatures:
    """GLCM-derived scalars."""

    contrast: float
    energy: float
    homogeneity: float
    entropy: float

    def as_dict(self) -> dict[str, float]:
        return {
            "contrast": self.contrast,
            "energy": self.energy,
            "homogeneity": self.homogeneity,
            "entropy": self.entropy,
        }


@dataclass
class QualityThresholds:
    """Acceptance bounds for the quality checks.

    ``texture_bounds`` maps a feature name (contrast/energy/homogeneity/
    entropy) to an inclusive [low, high] range; absent features are
    unconstrained. The default removes only the low-entropy tail.
    """

    min_sharpness: float = 0.0
    luminance_range: tuple[float, float] = (0.15, 0.85)
    saturation_range: tuple[float, float] = (0.02, 0.85)
    texture_bounds: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"entropy": (0.1, math.inf)}
    )
    max_aspect_ratio: float = 2.5

    def __post_init__(self) -> None:
        for name, (lo, hi) in (
            ("luminance_range", self.luminance_range),
            ("saturation_range", self.saturation_range),
            *((f"texture_bounds[{k}]", v) for k, v in self.texture_bounds.items()),
        ):
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered: {lo} > {hi}")
        if self.max_aspect_ratio < 1.0:
            raise ValueError("max_aspect_ratio must be >= 1")


@dataclass
class QualityVerdict:
    passed: bool
    failed_checks: list[str]
    measurements: dict[str, float]


def tenengrad(img: GrayImage) -> float:
    """Mean squared Sobel gradient magnitude over interior pixels."""
    a = img.data
    h, w = a.shape
    if h < 3 or w < 3:
        raise ValueError(f"image too small for 3x3 gradients: {h}x{w}")
    gx = _conv3_valid(a, _SOBEL_X)
    gy = _conv3_valid(a, _SOBEL_Y)
    return float(np.mean(gx * gx + gy * gy))


def _conv3_valid(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = a.shape
    out = np.zeros((h - 2, w - 2))
    for di in range(3):
        for dj in range(3):
            k = kernel[di, dj]
            if k != 0.0:
                out += k * a[di : h - 2 + di, dj : w - 2 + dj]
    return out


def exposure_stats(img: GrayImage) -> float:
    """Arithmetic mean luminance in [0, 1]."""
    if img.data.size == 0:
        raise ValueError("empty image")
    return float(img.data.mean())


def saturation_stats(img: ImageTensor) -> tuple[float, float]:
    """Mean and standard deviation of per-pixel HSV saturation.

    S = (max - min) / max with S = 0 where max = 0.
    """
    if img.channels != 3:
        raise ValueError("saturation requires a 3-channel image")
    rgb = img.unit()
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(mx > 0.0, (mx - mn) / np.where(mx > 0.0, mx, 1.0), 0.0)
    return float(sat.mean()), float(sat.std())


def glcm_matrix(
    img: GrayImage,
    levels: int = DEFAULT_GLCM_LEVELS,
    offsets: tuple[tuple[int, int], ...] = DEFAULT_GLCM_OFFSETS,
) -> np.ndarray:
    """Symmetric, normalized gray-level co-occurrence matrix.

    Luminance is quantized into ``levels`` uniform bins; pairs from all
    offsets are accumulated into one joint matrix before normalization.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    h, w = img.data.shape
    q = np.minimum((img.data * levels).astype(np.int64), levels - 1)
    counts = np.zeros((levels, levels), dtype=np.int64)
    for dy, dx in offsets:
        if dy == 0 and dx == 0:
            raise ValueError("offset (0, 0) is not a co-occurrence")
        if abs(dy) >= h or abs(dx) >= w:
            raise ValueError(f"offset ({dy}, {dx}) exceeds image extent {h}x{w}")
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        a = q[y0:y1, x0:x1].ravel()
        b = q[y0 + dy : y1 + dy, x0 + dx : x1 + dx].ravel()
        np.add.at(counts, (a, b), 1)
        np.add.at(counts, (b, a), 1)
    total = counts.sum()
    if total == 0:
        raise ValueError("no valid pixel pairs for the given offsets")
    return counts / total


def glcm_features(
    img: GrayImage,
    levels: int = DEFAULT_GLCM_LEVELS,
    offsets: tuple[tuple[int, int], ...] = DEFAULT_GLCM_OFFSETS,
) -> TextureFeatures:
    """Contrast, energy, homogeneity, and entropy of the joint GLCM."""
    p = glcm_matrix(img, levels, offsets)
    return features_from_glcm(p)


def features_from_glcm(p: np.ndarray) -> TextureFeatures:
    levels = p.shape[0]
    i, j = np.meshgrid(np.arange(levels), np.arange(levels), indexing="ij")
    diff = i - j
    contrast = float((p * diff * diff).sum())
    energy = float((p * p).sum())
    homogeneity = float((p / (1.0 + np.abs(diff))).sum())
    nz = p[p > 0.0]
    entropy = float(-(nz * np.log(nz)).sum())
    return TextureFeatures(contrast, energy, homogeneity, entropy)


def measure_image(
    img: ImageTensor,
    glcm_levels: int = DEFAULT_GLCM_LEVELS,
    glcm_offsets: tuple[tuple[int, int], ...] = DEFAULT_GLCM_OFFSETS,
    tile_size: int | None = None,
) -> dict[str, float]:
    """All quality measurements under the stable name contract.

    With ``tile_size`` set, metrics are computed per tile and averaged,
    bounding peak memory on very large inputs; aspect ratio always comes
    from the full frame. 1-channel images report zero saturation.
    """
    if tile_size is not None and tile_size > 0:
        tiles = list(_tiles(img, tile_size))
        per_tile = [measure_image(t, glcm_levels, glcm_offsets, None) for t in tiles]
        out = {
            name: float(np.mean([m[name] for m in per_tile]))
            for name in MEASUREMENT_NAMES
            if name != "aspect_ratio"
        }
        out["aspect_ratio"] = img.aspect_ratio()
        return out

    gray = to_grayscale(img)
    if img.channels == 3:
        mean_sat, _ = saturation_stats(img)
    else:
        mean_sat = 0.0
    texture = glcm_features(gray, glcm_levels, glcm_offsets)
    return {
        "tenengrad": tenengrad(gray),
        "mean_luminance": exposure_stats(gray),
        "mean_saturation": mean_sat,
        "glcm_contrast": texture.contrast,
        "glcm_energy": texture.energy,
        "glcm_homogeneity": texture.homogeneity,
        "glcm_entropy": texture.entropy,
        "aspect_ratio": img.aspect_ratio(),
    }


def _tiles(img: ImageTensor, size: int):
    h, w = img.height, img.width
    for y in range(0, h, size):
        for x in range(0, w, size):
            tile = img.data[y : min(y + size, h), x : min(x + size, w)]
            if tile.shape[0] >= 3 and tile.shape[1] >= 3:
                yield ImageTensor(tile, fmt=img.fmt)


def judge_measurements(
    measurements: dict[str, float], thresholds: QualityThresholds
) -> QualityVerdict:
    """Apply thresholds to a measurement map; the map is returned intact.

    Failed checks are listed most-specific first (exposure extremes before
    the sharpness cut they usually imply); the pipeline uses the first
    entry as the drop reason.
    """
    failed: list[str] = []
    lo, hi = thresholds.luminance_range
    if not (lo <= measurements["mean_luminance"] <= hi):
        failed.append("exposure")
    if measurements["tenengrad"] < thresholds.min_sharpness:
        failed.append("sharpness")
    lo, hi = thresholds.saturation_range
    if not (lo <= measurements["mean_saturation"] <= hi):
        failed.append("saturation")
    for feature, (lo, hi) in sorted(thresholds.texture_bounds.items()):
        value = measurements[f"glcm_{feature}"]
        if not (lo <= value <= hi):
            failed.append(f"texture_{feature}")
    if measurements["aspect_ratio"] > thresholds.max_aspect_ratio:
        failed.append("aspect_ratio")
    return QualityVerdict(passed=not failed, failed_checks=failed, measurements=measurements)


def assess_quality(
    img: ImageTensor,
    thresholds: QualityThresholds,
    glcm_levels: int = DEFAULT_GLCM_LEVELS,
    glcm_offsets: tuple[tuple[int, int], ...] = DEFAULT_GLCM_OFFSETS,
    tile_size: int | None = None,
) -> QualityVerdict:
    """Run all checks; the measurements map is fully populated even when
    the verdict fails."""
    measurements = measure_image(img, glcm_levels, glcm_offsets, tile_size)
    return judge_measurements(measurements, thresholds)
