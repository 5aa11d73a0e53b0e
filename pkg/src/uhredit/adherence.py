"""Instruction-adherence scoring.

A pair is decomposed into edited and non-edited regions by a mask (supplied
externally or derived from pixel differences). Alignment is measured inside
the edited region against the instruction embedding; preservation is the
RMS pixel distance outside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import ImageTensor

__all__ = [
    "EditMask",
    "AdherenceScore",
    "NoEditRegionError",
    "diff_mask",
    "edited_region_alignment",
    "unedited_region_distance",
    "adherence_verdict",
]


class NoEditRegionError(ValueError):
    """The mask is empty: the pair shows no detectable edit."""


@dataclass
class EditMask:
    """Per-pixel boolean plane; True marks the edited region."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"expected HxW mask, got shape {arr.shape}")
        self.data = arr.astype(bool)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def is_empty(self) -> bool:
        return not bool(self.data.any())

    def bounding_box(self) -> tuple[int, int, int, int]:
        """(y0, x0, y1, x1), half-open. Raises on an empty mask."""
        if self.is_empty():
            raise NoEditRegionError("mask is empty")
        rows = np.flatnonzero(self.data.any(axis=1))
        cols = np.flatnonzero(self.data.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


@dataclass
class AdherenceScore:
    edited_alignment: float
    unedited_distance: float
    verdict: str  # keep | drop


def _shifted(mask: np.ndarray, dy: int, dx: int, fill: bool) -> np.ndarray:
    out = np.full_like(mask, fill)
    h, w = mask.shape
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    yd = slice(max(0, -dy), min(h, h - dy))
    xd = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = mask[yd, xd]
    return out


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out |= _shifted(mask, dy, dx, fill=False)
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.ones_like(mask)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            # Outside the frame counts as True so border regions survive.
            out &= _shifted(mask, dy, dx, fill=True)
    return out


def diff_mask(
    input_img: ImageTensor,
    edited_img: ImageTensor,
    pixel_threshold: float = 0.06,
    morph_radius: int = 2,
) -> EditMask:
    """Difference-based edit mask: max-channel absolute difference above
    ``pixel_threshold``, then a morphological close followed by an open
    with a square element of the given Chebyshev radius."""
    ua, ub = input_img.unit(), edited_img.unit()
    if ua.shape != ub.shape:
        raise ValueError("images must share dimensions")
    mask = np.abs(ua - ub).max(axis=2) > pixel_threshold
    if morph_radius > 0:
        mask = _erode(_dilate(mask, morph_radius), morph_radius)  # close
        mask = _dilate(_erode(mask, morph_radius), morph_radius)  # open
    return EditMask(mask)


def edited_region_alignment(
    edited_img: ImageTensor,
    mask: EditMask,
    instruction_embedding: np.ndarray,
    embedder,
) -> float:
    """Cosine between the embedding of the mask's bounding-box crop and the
    instruction embedding.

    Raises NoEditRegionError for an empty mask: a missing edit is a distinct
    condition from a poorly aligned one.
    """
    if (mask.height, mask.width) != (edited_img.height, edited_img.width):
        raise ValueError("mask dimensions must match the image")
    y0, x0, y1, x1 = mask.bounding_box()
    crop = ImageTensor(edited_img.data[y0:y1, x0:x1], fmt=edited_img.fmt)
    crop_embedding = embedder.embed_image(crop)
    ia = np.asarray(instruction_embedding, dtype=np.float64).ravel()
    ca = np.asarray(crop_embedding, dtype=np.float64).ravel()
    if ia.shape != ca.shape:
        raise ValueError(f"embedding dimension mismatch: {ca.shape} vs {ia.shape}")
    na, nb = np.linalg.norm(ca), np.linalg.norm(ia)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(ca @ ia / (na * nb), -1.0, 1.0))


def unedited_region_distance(
    input_img: ImageTensor,
    edited_img: ImageTensor,
    mask: EditMask,
    normalized: bool = True,
) -> float:
    """Preservation score outside the mask.

    Root-mean-square of per-pixel, per-channel differences over pixels where
    the mask is False (0 when the mask covers everything). With
    ``normalized=False`` the raw sum of squared differences is returned
    instead; that variant scales with resolution.
    """
    ua, ub = input_img.unit(), edited_img.unit()
    if ua.shape != ub.shape:
        raise ValueError("images must share dimensions")
    if (mask.height, mask.width) != ua.shape[:2]:
        raise ValueError("mask dimensions must match the images")
    outside = ~mask.data
    if not outside.any():
        return 0.0
    diff = ua[outside] - ub[outside]
    if normalized:
        return float(np.sqrt(np.mean(diff * diff)))
    return float(np.sum(diff * diff))


def adherence_verdict(
    edited_alignment: float,
    unedited_distance: float,
    min_alignment: float = 0.20,
    max_distance: float = 0.05,
) -> str:
    """keep iff alignment meets the floor and preservation meets the cap."""
    ok = edited_alignment >= min_alignment and unedited_distance <= max_distance
    return "keep" if ok else "drop"
