"""Four-stage filtering pipeline over a triplet manifest.

Stage order is fixed: preliminary file checks, image-quality filtering,
instruction-adherence filtering, then aesthetic ranking that retains the
top fraction. Per-record failures drop the record with a named reason and
never abort a run; configuration errors abort before any work.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import adherence as adh
from . import quality
from .images import ImageTensor, file_digest, load_image
from .manifest import TripletRecord, load_manifest, save_manifest
from .providers import DirectoryEmbeddingProvider, FallbackEmbedder, ProviderError

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "QualityStageConfig",
    "AdherenceStageConfig",
    "AestheticStageConfig",
    "StageReport",
    "stage_preliminary",
    "stage_quality",
    "stage_adherence",
    "stage_aesthetic",
    "run_pipeline",
    "run_pipeline_files",
]

STAGE_ORDER = ("preliminary", "quality", "adherence", "aesthetic")


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass
class QualityStageConfig:
    min_sharpness: float = 0.0
    # With a percentile set, the absolute cut is derived per corpus so the
    # bottom tail is dropped regardless of absolute scale.
    sharpness_percentile: float | None = 10.0
    luminance_range: tuple[float, float] = (0.15, 0.85)
    saturation_range: tuple[float, float] = (0.02, 0.85)
    texture_bounds: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"entropy": (0.1, math.inf)}
    )
    max_aspect_ratio: float = 2.5
    glcm_levels: int = 16
    tile_size: int | None = None

    def thresholds(self, min_sharpness: float | None = None) -> quality.QualityThresholds:
        return quality.QualityThresholds(
            min_sharpness=self.min_sharpness if min_sharpness is None else min_sharpness,
            luminance_range=tuple(self.luminance_range),
            saturation_range=tuple(self.saturation_range),
            texture_bounds={k: tuple(v) for k, v in self.texture_bounds.items()},
            max_aspect_ratio=self.max_aspect_ratio,
        )


@dataclass
class AdherenceStageConfig:
    pixel_threshold: float = 0.06
    morph_radius: int = 2
    min_alignment: float = 0.20
    max_distance: float = 0.05
    normalized_distance: bool = True


@dataclass
class AestheticStageConfig:
    # Scores injected by external predictors, read from each record's
    # scores map and min-max normalized before averaging.
    provider_keys: tuple[str, ...] = ("laion_aesthetic", "artimuse")
    weight_sharpness: float = 0.4
    weight_entropy: float = 0.3
    weight_exposure: float = 0.3


@dataclass
class PipelineConfig:
    stages: tuple[str, ...] = STAGE_ORDER
    retention_fraction: float = 0.2
    digest_algorithm: str = "md5"
    parallelism: int = 1
    seed: int = 0
    min_file_size: int = 32768
    max_aspect_ratio: float = 2.5
    fail_open: bool = False
    embeddings_dir: str | None = None
    composite_ranking: bool = False
    quality: QualityStageConfig = field(default_factory=QualityStageConfig)
    adherence: AdherenceStageConfig = field(default_factory=AdherenceStageConfig)
    aesthetic: AestheticStageConfig = field(default_factory=AestheticStageConfig)

    def __post_init__(self) -> None:
        if not (0.0 < self.retention_fraction <= 1.0):
            raise ConfigError("retention_fraction must lie in (0, 1]")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.min_file_size < 0:
            raise ConfigError("min_file_size must be >= 0")
        for stage in self.stages:
            if stage not in STAGE_ORDER:
                raise ConfigError(f"unknown stage {stage!r}")

    # -- JSON round trip -----------------------------------------------

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)

        def build(section_cls, data, name):
            if not isinstance(data, dict):
                raise ConfigError(f"section {name!r} must be an object")
            fields = {f.name for f in section_cls.__dataclass_fields__.values()}
            unknown = set(data) - fields
            if unknown:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
            data = dict(data)
            if "texture_bounds" in data:
                data["texture_bounds"] = {
                    k: _bound_from_json(v) for k, v in data["texture_bounds"].items()
                }
            for key in ("luminance_range", "saturation_range", "provider_keys", "stages"):
                if key in data and isinstance(data[key], list):
                    data[key] = tuple(data[key])
            try:
                return section_cls(**data)
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc

        sections = {
            "quality": QualityStageConfig,
            "adherence": AdherenceStageConfig,
            "aesthetic": AestheticStageConfig,
        }
        kwargs = {}
        for name, section_cls in sections.items():
            if name in obj:
                kwargs[name] = build(section_cls, obj.pop(name), name)
        top_fields = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(obj) - top_fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "stages" in obj and isinstance(obj["stages"], list):
            obj["stages"] = tuple(obj["stages"])
        try:
            return cls(**obj, **kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        q = self.quality
        return {
            "stages": list(self.stages),
            "retention_fraction": self.retention_fraction,
            "digest_algorithm": self.digest_algorithm,
            "parallelism": self.parallelism,
            "seed": self.seed,
            "min_file_size": self.min_file_size,
            "max_aspect_ratio": self.max_aspect_ratio,
            "fail_open": self.fail_open,
            "embeddings_dir": self.embeddings_dir,
            "composite_ranking": self.composite_ranking,
            "quality": {
                "min_sharpness": q.min_sharpness,
                "sharpness_percentile": q.sharpness_percentile,
                "luminance_range": list(q.luminance_range),
                "saturation_range": list(q.saturation_range),
                "texture_bounds": {k: _bound_to_json(v) for k, v in q.texture_bounds.items()},
                "max_aspect_ratio": q.max_aspect_ratio,
                "glcm_levels": q.glcm_levels,
                "tile_size": q.tile_size,
            },
            "adherence": {
                "pixel_threshold": self.adherence.pixel_threshold,
                "morph_radius": self.adherence.morph_radius,
                "min_alignment": self.adherence.min_alignment,
                "max_distance": self.adherence.max_distance,
                "normalized_distance": self.adherence.normalized_distance,
            },
            "aesthetic": {
                "provider_keys": list(self.aesthetic.provider_keys),
                "weight_sharpness": self.aesthetic.weight_sharpness,
                "weight_entropy": self.aesthetic.weight_entropy,
                "weight_exposure": self.aesthetic.weight_exposure,
            },
        }


def _bound_to_json(bound: tuple[float, float]) -> list:
    lo, hi = bound
    return [None if math.isinf(lo) else lo, None if math.isinf(hi) else hi]


def _bound_from_json(bound) -> tuple[float, float]:
    lo, hi = bound
    return (-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))


@dataclass
class StageReport:
    stage: str
    input_count: int
    passed: int
    dropped: dict[str, int]
    wall_time: float
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.input_count != self.passed + sum(self.dropped.values()):
            raise ValueError("input_count must equal passed + dropped")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input_count": self.input_count,
            "passed": self.passed,
            "dropped": dict(sorted(self.dropped.items())),
            "wall_time": self.wall_time,
            "notes": list(self.notes),
        }


def _pmap(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _finish(stage: str, records, kept, drops, started) -> tuple[list, StageReport]:
    reasons: dict[str, int] = {}
    for _, reason in drops:
        reasons[reason] = reasons.get(reason, 0) + 1
    report = StageReport(
        stage=stage,
        input_count=len(records),
        passed=len(kept),
        dropped=reasons,
        wall_time=time.perf_counter() - started,
    )
    return kept, report


def _drop(record: TripletRecord, stage: str, reason: str) -> tuple[TripletRecord, str]:
    record.stage_verdicts[stage] = "fail"
    record.drop_reason = reason
    return record, reason


def _pass(record: TripletRecord, stage: str) -> TripletRecord:
    record.stage_verdicts[stage] = "pass"
    return record


# ---------------------------------------------------------------------------
# Stage 1: preliminary file checks
# ---------------------------------------------------------------------------


def stage_preliminary(
    records: list[TripletRecord], cfg: PipelineConfig
) -> tuple[list[TripletRecord], StageReport]:
    """Drop unreadable files, abnormally small files, byte-level duplicates
    (first manifest occurrence wins), and extreme aspect ratios."""
    started = time.perf_counter()

    def probe(record: TripletRecord):
        for role, path in (("input", record.input_path), ("edited", record.edited_path)):
            p = Path(path)
            if not p.is_file():
                return record, "unreadable", None
            if p.stat().st_size < cfg.min_file_size:
                return record, "too_small", None
        try:
            img_in = load_image(record.input_path, cfg.digest_algorithm)
            img_ed = load_image(record.edited_path, cfg.digest_algorithm)
        except OSError:
            return record, "unreadable", None
        record.digest_input = img_in.digest
        record.digest_edited = img_ed.digest
        record.width = img_in.width
        record.height = img_in.height
        if (
            img_in.aspect_ratio() > cfg.max_aspect_ratio
            or img_ed.aspect_ratio() > cfg.max_aspect_ratio
        ):
            return record, "aspect_ratio", None
        return record, None, (img_in.digest, img_ed.digest)

    kept: list[TripletRecord] = []
    drops: list[tuple[TripletRecord, str]] = []
    seen: set[tuple[str, str]] = set()
    for record, reason, digest_pair in _pmap(probe, records, cfg.parallelism):
        if reason is None and digest_pair in seen:
            reason = "duplicate"
        if reason is not None:
            drops.append(_drop(record, "preliminary", reason))
        else:
            seen.add(digest_pair)
            kept.append(_pass(record, "preliminary"))
    return _finish("preliminary", records, kept, drops, started)


# ---------------------------------------------------------------------------
# Stage 2: image-quality filtering
# ---------------------------------------------------------------------------


def stage_quality(
    records: list[TripletRecord], cfg: PipelineConfig
) -> tuple[list[TripletRecord], StageReport]:
    """Apply the quality checks to both images; a triplet is dropped when
    either image fails (strictest reading)."""
    started = time.perf_counter()
    qcfg = cfg.quality

    def measure(record: TripletRecord):
        try:
            out = {}
            for role, path in (("input", record.input_path), ("edited", record.edited_path)):
                img = load_image(path)
                out[role] = quality.measure_image(
                    img, glcm_levels=qcfg.glcm_levels, tile_size=qcfg.tile_size
                )
            return record, out, None
        except OSError:
            return record, None, "unreadable"

    measured = _pmap(measure, records, cfg.parallelism)

    min_sharpness = qcfg.min_sharpness
    if qcfg.sharpness_percentile is not None:
        values = [
            m[role]["tenengrad"]
            for _, m, err in measured
            if err is None
            for role in ("input", "edited")
        ]
        if values:
            min_sharpness = float(np.percentile(values, qcfg.sharpness_percentile))
    thresholds = qcfg.thresholds(min_sharpness)

    kept: list[TripletRecord] = []
    drops: list[tuple[TripletRecord, str]] = []
    for record, measurements, err in measured:
        if err is not None:
            if cfg.fail_open:
                kept.append(_pass(record, "quality"))
            else:
                drops.append(_drop(record, "quality", err))
            continue
        failed: list[str] = []
        for role in ("input", "edited"):
            verdict = quality.judge_measurements(measurements[role], thresholds)
            for name, value in verdict.measurements.items():
                record.scores[f"{role}_{name}"] = value
            failed.extend(c for c in verdict.failed_checks if c not in failed)
        if failed:
            drops.append(_drop(record, "quality", failed[0]))
        else:
            kept.append(_pass(record, "quality"))
    return _finish("quality", records, kept, drops, started)


# ---------------------------------------------------------------------------
# Stage 3: instruction-adherence filtering
# ---------------------------------------------------------------------------


def _load_mask(path: str, height: int, width: int) -> adh.EditMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if arr.shape != (height, width):
        raise ValueError(f"mask shape {arr.shape} does not match image {height}x{width}")
    return adh.EditMask(arr > 0)


def stage_adherence(
    records: list[TripletRecord],
    cfg: PipelineConfig,
    embed_provider=None,
) -> tuple[list[TripletRecord], StageReport]:
    """Score edit alignment and content preservation per triplet.

    Masks come from the manifest when supplied (1-channel PNG, nonzero =
    edited) and fall back to the pixel-difference mask. The alignment check
    runs only when an instruction embedding is available; a missing
    embedding skips that check rather than failing the record.
    """
    started = time.perf_counter()
    acfg = cfg.adherence
    if embed_provider is None and cfg.embeddings_dir:
        embed_provider = DirectoryEmbeddingProvider(cfg.embeddings_dir, cfg.digest_algorithm)
    crop_embedder = FallbackEmbedder()

    def score(record: TripletRecord):
        try:
            img_in = load_image(record.input_path)
            img_ed = load_image(record.edited_path)
        except OSError:
            return record, "unreadable"
        try:
            if record.mask_path:
                mask = _load_mask(record.mask_path, img_in.height, img_in.width)
            else:
                mask = adh.diff_mask(img_in, img_ed, acfg.pixel_threshold, acfg.morph_radius)
            if mask.is_empty():
                return record, "no-edit"
            distance = adh.unedited_region_distance(
                img_in, img_ed, mask, normalized=acfg.normalized_distance
            )
            record.scores["unedited_distance"] = distance
            if distance > acfg.max_distance:
                return record, "preservation"

            alignment = record.scores.get("edited_alignment")
            if alignment is None and embed_provider is not None:
                vec = embed_provider.instruction_embedding(record.instruction)
                if vec is not None:
                    alignment = adh.edited_region_alignment(img_ed, mask, vec, crop_embedder)
            if alignment is not None:
                record.scores["edited_alignment"] = float(alignment)
                if alignment < acfg.min_alignment:
                    return record, "alignment"
            return record, None
        except (ProviderError, ValueError):
            return record, "provider_error"

    kept: list[TripletRecord] = []
    drops: list[tuple[TripletRecord, str]] = []
    for record, reason in _pmap(score, records, cfg.parallelism):
        if reason is None or (cfg.fail_open and reason == "provider_error"):
            kept.append(_pass(record, "adherence"))
        else:
            drops.append(_drop(record, "adherence", reason))
    return _finish("adherence", records, kept, drops, started)


# ---------------------------------------------------------------------------
# Stage 4: aesthetic ranking
# ---------------------------------------------------------------------------


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi - lo == 0.0:
        return [0.5 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def _fallback_composite(record: TripletRecord, cfg: AestheticStageConfig) -> float | None:
    sharp = record.scores.get("edited_tenengrad")
    entropy = record.scores.get("edited_glcm_entropy")
    lum = record.scores.get("edited_mean_luminance")
    if sharp is None or entropy is None or lum is None:
        return None
    exposure_centering = 1.0 - 2.0 * abs(lum - 0.5)
    return (
        cfg.weight_sharpness * sharp
        + cfg.weight_entropy * entropy
        + cfg.weight_exposure * exposure_centering
    )


def stage_aesthetic(
    records: list[TripletRecord],
    cfg: PipelineConfig,
    providers: tuple = (),
) -> tuple[list[TripletRecord], StageReport]:
    """Rank by aesthetic score and keep the top retention fraction.

    Per record the score is the mean of the min-max-normalized provider
    scores (external predictor outputs injected in the scores map, plus any
    callable providers). Records with no provider score fall back to a
    composite of sharpness, texture entropy, and exposure centering; the
    report flags when the fallback was used. Ties break by id; exactly
    ceil(retention_fraction * n) records are kept.
    """
    started = time.perf_counter()
    if not records:
        return _finish("aesthetic", records, [], [], started)

    sources: dict[str, list[float | None]] = {}
    for key in cfg.aesthetic.provider_keys:
        sources[key] = [r.scores.get(key) for r in records]
    for i, provider in enumerate(providers):
        sources[f"provider_{i}"] = [provider(r) for r in records]

    fallback_scores: list[float | None] = []
    for i, record in enumerate(records):
        if any(vals[i] is not None for vals in sources.values()):
            fallback_scores.append(None)
        else:
            fallback_scores.append(_fallback_composite(record, cfg.aesthetic))

    # Normalize each source over the records it covers, then average the
    # available normalized scores per record.
    used_fallback = False
    normalized: dict[str, dict[int, float]] = {}
    for name, vals in list(sources.items()) + [("fallback", fallback_scores)]:
        idx = [i for i, v in enumerate(vals) if v is not None]
        if not idx:
            continue
        norm = _minmax([float(vals[i]) for i in idx])
        normalized[name] = dict(zip(idx, norm))
        if name == "fallback":
            used_fallback = True

    composite: list[float] = []
    for i, record in enumerate(records):
        parts = [normalized[name][i] for name in normalized if i in normalized[name]]
        score = float(np.mean(parts)) if parts else 0.0
        if cfg.composite_ranking:
            extras = [
                record.scores.get("edited_tenengrad"),
                record.scores.get("edited_glcm_entropy"),
            ]
            extra_vals = [v for v in extras if v is not None]
            if extra_vals:
                score = float(np.mean([score] + _minmax(extra_vals)))
        record.scores["aesthetic"] = score
        composite.append(score)

    keep_n = math.ceil(cfg.retention_fraction * len(records))
    order = sorted(range(len(records)), key=lambda i: (-composite[i], records[i].id))
    keep_idx = set(order[:keep_n])

    kept: list[TripletRecord] = []
    drops: list[tuple[TripletRecord, str]] = []
    for i, record in enumerate(records):
        if i in keep_idx:
            kept.append(_pass(record, "aesthetic"))
        else:
            drops.append(_drop(record, "aesthetic", "ranked_out"))
    kept_records, report = _finish("aesthetic", records, kept, drops, started)
    if used_fallback:
        report.notes = report.notes + ("fallback_composite_used",)
    return kept_records, report


# ---------------------------------------------------------------------------
# End-to-end runner
# ---------------------------------------------------------------------------

_STAGE_FNS = {
    "preliminary": stage_preliminary,
    "quality": stage_quality,
    "adherence": stage_adherence,
    "aesthetic": stage_aesthetic,
}


def run_pipeline(
    records: list[TripletRecord],
    cfg: PipelineConfig,
    embed_provider=None,
    aesthetic_providers: tuple = (),
) -> tuple[list[TripletRecord], dict]:
    """Run the enabled stages in the fixed order and assemble the report."""
    current = records
    reports: list[StageReport] = []
    for stage in STAGE_ORDER:
        if stage not in cfg.stages:
            continue
        if stage == "adherence":
            current, report = stage_adherence(current, cfg, embed_provider)
        elif stage == "aesthetic":
            current, report = stage_aesthetic(current, cfg, aesthetic_providers)
        else:
            current, report = _STAGE_FNS[stage](current, cfg)
        reports.append(report)
    report = {
        "input_count": len(records),
        "output_count": len(current),
        "stages": [r.to_dict() for r in reports],
        "config": cfg.to_dict(),
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    return current, report


def run_pipeline_files(
    manifest_path: str | Path,
    cfg: PipelineConfig,
    out_path: str | Path,
    report_path: str | Path | None = None,
    embed_provider=None,
    aesthetic_providers: tuple = (),
) -> tuple[list[TripletRecord], dict]:
    """File-level wrapper: load, run, write the kept manifest atomically,
    and optionally write the JSON report."""
    import json

    records = load_manifest(manifest_path)
    kept, report = run_pipeline(records, cfg, embed_provider, aesthetic_providers)
    save_manifest(kept, out_path)
    if report_path is not None:
        report_path = Path(report_path)
        tmp = report_path.with_suffix(report_path.suffix + ".tmp")
        tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(report_path)
    return kept, report
