"""Frame-pair mining: scene segmentation, dense optical flow, and the
keep/drop rule for candidate input/edited pairs.

Pairs are dropped when they are nearly identical (high semantic similarity
with almost no motion) or when heavy motion comes without semantic
correspondence; everything in between is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d, uniform_filter

from .formats import read_flow
from .images import GrayImage, ImageTensor, resize_plane, to_grayscale
from .providers import FallbackEmbedder, ProviderError

__all__ = [
    "FrameSequence",
    "ClipBoundary",
    "FlowField",
    "FlowConfig",
    "PairScore",
    "PairThresholds",
    "detect_scenes",
    "optical_flow",
    "motion_score",
    "semantic_similarity",
    "pair_verdict",
    "score_pair",
    "score_pairs",
]

HISTOGRAM_BINS = 32


@dataclass
class FrameSequence:
    frames: list[ImageTensor]
    timestamps: list[float] | None = None

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("frame sequence must be nonempty")
        h, w = self.frames[0].height, self.frames[0].width
        for f in self.frames:
            if (f.height, f.width) != (h, w):
                raise ValueError("all frames must share dimensions")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class ClipBoundary:
    """Half-open frame range [start, end)."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start >= self.end:
            raise ValueError(f"degenerate clip [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class FlowField:
    """Per-pixel displacement in pixels; ``u`` horizontal, ``v`` vertical.

    The planes live on the evaluation grid, which may be a downscaled
    version of the native frame; displacement values are always expressed
    in native pixel units.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass
class FlowConfig:
    pyramid_levels: int = 3
    window: int = 15
    iterations: int = 3
    # Frames are downscaled so max(H, W) <= max_side before flow; magnitudes
    # are rescaled back to native pixel units.
    max_side: int = 1024


@dataclass
class PairThresholds:
    sim_high: float = 0.985
    sim_low: float = 0.80
    motion_low: float = 0.5
    motion_high: float = 40.0

    def __post_init__(self) -> None:
        if self.sim_low > self.sim_high:
            raise ValueError("sim_low must be <= sim_high")
        if self.motion_low > self.motion_high:
            raise ValueError("motion_low must be <= motion_high")


@dataclass
class PairScore:
    semantic_similarity: float
    motion_score: float
    verdict: str  # keep | drop_similar | drop_misaligned | error
    error: str | None = None


def frame_histogram_distance(a: ImageTensor, b: ImageTensor, bins: int = HISTOGRAM_BINS) -> float:
    """Mean over channels of the L1 distance between normalized per-channel
    histograms. Ranges over [0, 2]."""
    ua, ub = a.unit(), b.unit()
    if ua.shape != ub.shape:
        raise ValueError("frames must share dimensions")
    dist = 0.0
    channels = ua.shape[2]
    for c in range(channels):
        ha, _ = np.histogram(ua[:, :, c], bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(ub[:, :, c], bins=bins, range=(0.0, 1.0))
        ha = ha / ha.sum()
        hb = hb / hb.sum()
        dist += float(np.abs(ha - hb).sum())
    return dist / channels


def detect_scenes(
    seq: FrameSequence, threshold: float = 0.5, min_clip_len: int = 1
) -> list[ClipBoundary]:
    """Histogram-difference shot segmentation.

    A boundary is declared wherever the consecutive-frame histogram distance
    exceeds ``threshold``; clips shorter than ``min_clip_len`` are merged
    into their predecessor (the first clip merges forward). The returned
    boundaries partition [0, len(seq)).
    """
    n = len(seq)
    cuts = [0]
    for i in range(1, n):
        if frame_histogram_distance(seq.frames[i - 1], seq.frames[i]) > threshold:
            cuts.append(i)
    cuts.append(n)

    spans = [[cuts[k], cuts[k + 1]] for k in range(len(cuts) - 1)]
    merged: list[list[int]] = []
    for span in spans:
        if merged and span[1] - span[0] < min_clip_len:
            merged[-1][1] = span[1]
        else:
            merged.append(span)
    if len(merged) > 1 and merged[0][1] - merged[0][0] < min_clip_len:
        merged[1][0] = merged[0][0]
        merged.pop(0)
    return [ClipBoundary(s, e) for s, e in merged]


# ---------------------------------------------------------------------------
# Pyramidal Lucas-Kanade dense flow
# ---------------------------------------------------------------------------


def _downsample2(plane: np.ndarray) -> np.ndarray:
    # Binomial [1 4 6 4 1]/16 anti-alias blur, then decimate by 2.
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    blurred = convolve1d(plane, k, axis=0, mode="nearest")
    blurred = convolve1d(blurred, k, axis=1, mode="nearest")
    return blurred[::2, ::2]


def _bilinear_sample(plane: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    yy = np.clip(yy, 0.0, h - 1.0)
    xx = np.clip(xx, 0.0, w - 1.0)
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yy - y0
    fx = xx - x0
    top = plane[y0, x0] * (1.0 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1.0 - fx) + plane[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _lk_refine(a: np.ndarray, b: np.ndarray, u: np.ndarray, v: np.ndarray,
               window: int, iterations: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = a.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = np.gradient(a)
    sxx = uniform_filter(gx * gx, window, mode="nearest")
    sxy = uniform_filter(gx * gy, window, mode="nearest")
    syy = uniform_filter(gy * gy, window, mode="nearest")
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    good = (det > 1e-12) & (trace > 1e-9)
    safe_det = np.where(good, det, 1.0)

    for _ in range(iterations):
        yy, xx = ys + v, xs + u
        warped = _bilinear_sample(b, yy, xx)
        it = warped - a
        # Clamped out-of-frame samples carry no temporal evidence; zeroing
        # them keeps border pixels at their coarse-level estimate.
        inside = (yy >= 0.0) & (yy <= h - 1.0) & (xx >= 0.0) & (xx <= w - 1.0)
        it = np.where(inside, it, 0.0)
        sxt = uniform_filter(gx * it, window, mode="nearest")
        syt = uniform_filter(gy * it, window, mode="nearest")
        du = np.where(good, (sxy * syt - syy * sxt) / safe_det, 0.0)
        dv = np.where(good, (sxy * sxt - sxx * syt) / safe_det, 0.0)
        # Cap per-iteration updates; LK linearization is local.
        limit = float(window)
        u = u + np.clip(du, -limit, limit)
        v = v + np.clip(dv, -limit, limit)
    return u, v


def optical_flow(
    a: GrayImage,
    b: GrayImage,
    pyramid_levels: int = 3,
    window: int = 15,
    iterations: int = 3,
) -> FlowField:
    """Dense pyramidal Lucas-Kanade flow from ``a`` to ``b``.

    Textureless windows yield zero flow rather than errors. Deterministic.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("frames must share dimensions")
    coarsest = min(a.data.shape) // (2 ** (pyramid_levels - 1))
    if coarsest < window:
        raise ValueError(
            f"coarsest level ({coarsest}px) smaller than window ({window}); "
            "reduce pyramid_levels or window"
        )

    pyr_a = [a.data.astype(np.float64)]
    pyr_b = [b.data.astype(np.float64)]
    for _ in range(pyramid_levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(pyramid_levels - 1, -1, -1):
        if level != pyramid_levels - 1:
            h, w = pyr_a[level].shape
            u = resize_plane(u, h, w) * 2.0
            v = resize_plane(v, h, w) * 2.0
        u, v = _lk_refine(pyr_a[level], pyr_b[level], u, v, window, iterations)
    return FlowField(u=u, v=v)


def motion_score(flow: FlowField) -> float:
    """Mean per-pixel flow magnitude in pixels."""
    return float(np.mean(np.hypot(flow.u, flow.v)))


def semantic_similarity(ea: np.ndarray, eb: np.ndarray) -> float:
    """Cosine similarity between two embedding vectors."""
    ea = np.asarray(ea, dtype=np.float64).ravel()
    eb = np.asarray(eb, dtype=np.float64).ravel()
    if ea.shape != eb.shape:
        raise ValueError(f"dimension mismatch: {ea.shape} vs {eb.shape}")
    na = np.linalg.norm(ea)
    nb = np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(ea @ eb / (na * nb), -1.0, 1.0))


class LucasKanadeFlow:
    """Built-in flow provider: downscales to ``max_side``, runs pyramidal
    LK, and rescales displacements to native pixel units."""

    def __init__(self, config: FlowConfig | None = None):
        self.config = config or FlowConfig()

    def compute_flow(self, a: ImageTensor, b: ImageTensor) -> FlowField:
        cfg = self.config
        ga, gb = to_grayscale(a).data, to_grayscale(b).data
        native_side = max(ga.shape)
        scale = 1.0
        if native_side > cfg.max_side:
            scale = native_side / cfg.max_side
            h = max(1, round(ga.shape[0] / scale))
            w = max(1, round(ga.shape[1] / scale))
            ga = np.clip(resize_plane(ga, h, w, box=True), 0.0, 1.0)
            gb = np.clip(resize_plane(gb, h, w, box=True), 0.0, 1.0)
        field = optical_flow(
            GrayImage(ga), GrayImage(gb), cfg.pyramid_levels, cfg.window, cfg.iterations
        )
        return FlowField(u=field.u * scale, v=field.v * scale)


class DirectoryFlowProvider:
    """Precomputed FLO1 fields named ``<digest_a>-<digest_b>.flo``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def compute_flow(self, a: ImageTensor, b: ImageTensor) -> FlowField:
        if a.digest is None or b.digest is None:
            raise ProviderError("images carry no content digests")
        path = self.root / f"{a.digest}-{b.digest}.flo"
        if not path.is_file():
            raise ProviderError(f"no flow field at {path}")
        u, v = read_flow(path)
        return FlowField(u=u, v=v)


def pair_verdict(similarity: float, motion: float, thresholds: PairThresholds) -> str:
    """Keep/drop rule.

    drop_similar:    similarity >= sim_high and motion <= motion_low
    drop_misaligned: motion >= motion_high and similarity <= sim_low
    keep:            otherwise

    The two drop branches are mutually exclusive whenever sim_low < sim_high
    or motion_low < motion_high.
    """
    if similarity >= thresholds.sim_high and motion <= thresholds.motion_low:
        return "drop_similar"
    if motion >= thresholds.motion_high and similarity <= thresholds.sim_low:
        return "drop_misaligned"
    return "keep"


def score_pair(
    a: ImageTensor,
    b: ImageTensor,
    embedder=None,
    thresholds: PairThresholds | None = None,
    flow_provider=None,
    symmetric: bool = True,
) -> PairScore:
    """Score one candidate pair and apply the keep/drop rule.

    With ``symmetric`` (the default) flow is estimated in both directions
    and the motion scores averaged, making the verdict order-independent.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("pair frames must share dimensions")
    embedder = embedder or FallbackEmbedder()
    thresholds = thresholds or PairThresholds()
    flow_provider = flow_provider or LucasKanadeFlow()

    similarity = semantic_similarity(embedder.embed_image(a), embedder.embed_image(b))
    motion = motion_score(flow_provider.compute_flow(a, b))
    if symmetric:
        motion = 0.5 * (motion + motion_score(flow_provider.compute_flow(b, a)))
    verdict = pair_verdict(similarity, motion, thresholds)
    return PairScore(semantic_similarity=similarity, motion_score=motion, verdict=verdict)


def score_pairs(
    pairs,
    embedder=None,
    thresholds: PairThresholds | None = None,
    flow_provider=None,
    symmetric: bool = True,
) -> list[PairScore]:
    """Score a batch. Provider failures are attached to the affected pair
    (verdict "error") and never abort the rest of the batch."""
    results: list[PairScore] = []
    for a, b in pairs:
        try:
            results.append(score_pair(a, b, embedder, thresholds, flow_provider, symmetric))
        except (ProviderError, OSError) as exc:
            results.append(
                PairScore(math.nan, math.nan, verdict="error", error=str(exc))
            )
    return results
