import json

import numpy as np
import pytest
from PIL import Image

from uhredit.formats import write_embedding
from uhredit.images import ImageTensor, load_image, save_image
from uhredit.manifest import TripletRecord, save_manifest
from uhredit.pipeline import (
    ConfigError,
    PipelineConfig,
    StageReport,
    run_pipeline,
    run_pipeline_files,
    stage_adherence,
    stage_aesthetic,
    stage_preliminary,
    stage_quality,
)
from uhredit.providers import FallbackEmbedder, text_digest

from conftest import build_corpus, textured_rgb


def write_image(path, arr):
    save_image(ImageTensor(np.clip(arr, 0.0, 1.0)), path)
    return str(path)


def make_record(tmp_path, rid, base, edited, instruction="edit it"):
    return TripletRecord(
        id=rid,
        input_path=write_image(tmp_path / f"{rid}_in.png", base),
        edited_path=write_image(tmp_path / f"{rid}_ed.png", edited),
        instruction=instruction,
    )


def lenient_config(**overrides):
    overrides.setdefault("min_file_size", 0)
    overrides.setdefault("retention_fraction", 1.0)
    cfg = PipelineConfig(**overrides)
    cfg.quality.sharpness_percentile = None
    cfg.quality.min_sharpness = 0.01
    return cfg


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


class TestPipelineConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig()
        assert cfg.retention_fraction == 0.2
        assert cfg.digest_algorithm == "md5"

    def test_retention_bounds(self):
        with pytest.raises(ConfigError):
            PipelineConfig(retention_fraction=0.0)
        with pytest.raises(ConfigError):
            PipelineConfig(retention_fraction=1.5)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig(stages=("preliminary", "wat"))

    def test_dict_round_trip(self):
        cfg = PipelineConfig(retention_fraction=0.5, parallelism=4)
        cfg.quality.texture_bounds = {"entropy": (0.2, float("inf"))}
        back = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            PipelineConfig.from_dict({"retention": 0.2})
        with pytest.raises(ConfigError, match="unknown"):
            PipelineConfig.from_dict({"quality": {"sharpen": True}})

    def test_section_parsing(self):
        cfg = PipelineConfig.from_dict(
            {
                "retention_fraction": 0.4,
                "quality": {"min_sharpness": 0.5, "texture_bounds": {"entropy": [0.1, None]}},
                "adherence": {"max_distance": 0.2},
            }
        )
        assert cfg.retention_fraction == 0.4
        assert cfg.quality.min_sharpness == 0.5
        assert cfg.quality.texture_bounds["entropy"][1] == float("inf")
        assert cfg.adherence.max_distance == 0.2


def test_stage_report_count_invariant():
    with pytest.raises(ValueError):
        StageReport("quality", input_count=5, passed=3, dropped={"blur": 1}, wall_time=0.1)
    report = StageReport("quality", input_count=5, passed=3, dropped={"blur": 2}, wall_time=0.1)
    assert report.to_dict()["dropped"] == {"blur": 2}


# ---------------------------------------------------------------------------
# Stage: preliminary
# ---------------------------------------------------------------------------


class TestStagePreliminary:
    def test_byte_identical_duplicate_dropped_second(self, tmp_path):
        base = textured_rgb(0)
        edited = textured_rgb(1)
        first = make_record(tmp_path, "first", base, edited)
        dup = TripletRecord(
            id="dup",
            input_path=first.input_path,
            edited_path=first.edited_path,
            instruction="same files",
        )
        kept, report = stage_preliminary([first, dup], lenient_config())
        assert [r.id for r in kept] == ["first"]
        assert report.dropped == {"duplicate": 1}
        assert dup.drop_reason == "duplicate"

    def test_extreme_aspect_ratio_dropped(self, tmp_path):
        wide = textured_rgb(2, size=96)[:16, :96]  # ratio 6
        record = make_record(tmp_path, "wide", wide, wide)
        kept, report = stage_preliminary([record], lenient_config())
        assert kept == []
        assert report.dropped == {"aspect_ratio": 1}

    def test_truncated_png_dropped_unreadable(self, tmp_path):
        base = textured_rgb(3)
        record = make_record(tmp_path, "broken", base, base)
        data = (tmp_path / "broken_in.png").read_bytes()
        (tmp_path / "broken_in.png").write_bytes(data[: len(data) // 2])
        kept, report = stage_preliminary([record], lenient_config())
        assert kept == []
        assert report.dropped == {"unreadable": 1}

    def test_missing_file_dropped_unreadable(self, tmp_path):
        record = TripletRecord(
            id="ghost", input_path=str(tmp_path / "no.png"),
            edited_path=str(tmp_path / "no2.png"), instruction="x",
        )
        kept, report = stage_preliminary([record], lenient_config())
        assert kept == []
        assert report.dropped == {"unreadable": 1}

    def test_small_file_dropped(self, tmp_path):
        base = textured_rgb(4, size=32)
        record = make_record(tmp_path, "tiny", base, base)
        cfg = lenient_config()
        cfg.min_file_size = 10_000_000
        kept, report = stage_preliminary([record], cfg)
        assert report.dropped == {"too_small": 1}

    def test_digests_cached_on_record(self, tmp_path):
        base = textured_rgb(5)
        record = make_record(tmp_path, "ok", base, base)
        kept, _ = stage_preliminary([record], lenient_config())
        assert kept[0].digest_input is not None
        assert kept[0].digest_edited is not None
        assert kept[0].width == 96 and kept[0].height == 96


# ---------------------------------------------------------------------------
# Stage: quality
# ---------------------------------------------------------------------------


class TestStageQuality:
    def test_all_white_edited_drops_with_exposure_reason(self, tmp_path):
        base = textured_rgb(6)
        record = make_record(tmp_path, "white_ed", base, np.ones((96, 96, 3)))
        kept, report = stage_quality([record], lenient_config())
        assert kept == []
        assert report.dropped == {"exposure": 1}

    def test_either_image_failing_drops_triplet(self, tmp_path):
        base = textured_rgb(7)
        record = make_record(tmp_path, "white_in", np.ones((96, 96, 3)), base)
        kept, _ = stage_quality([record], lenient_config())
        assert kept == []

    def test_scores_extended_for_both_images(self, tmp_path):
        base = textured_rgb(8)
        edited = textured_rgb(9)
        record = make_record(tmp_path, "ok", base, edited)
        kept, _ = stage_quality([record], lenient_config())
        assert kept and "input_tenengrad" in kept[0].scores
        assert "edited_glcm_entropy" in kept[0].scores

    def test_percentile_mode_drops_bottom_tail(self, tmp_path):
        records = []
        for i in range(8):
            base = textured_rgb(20 + i)
            records.append(make_record(tmp_path, f"sharp{i}", base, base))
        from scipy.ndimage import gaussian_filter

        blurred = gaussian_filter(textured_rgb(40), (5, 5, 0))
        records.append(make_record(tmp_path, "soft", blurred, blurred))
        cfg = lenient_config()
        cfg.quality.sharpness_percentile = 10.0
        cfg.quality.min_sharpness = 0.0
        kept, report = stage_quality(records, cfg)
        assert "soft" not in [r.id for r in kept]
        assert report.dropped.get("sharpness") == 1


# ---------------------------------------------------------------------------
# Stage: adherence
# ---------------------------------------------------------------------------


class TestStageAdherence:
    def test_identical_pair_drops_no_edit(self, tmp_path):
        base = textured_rgb(10)
        record = make_record(tmp_path, "same", base, base, "replace the dog")
        kept, report = stage_adherence([record], lenient_config())
        assert kept == []
        assert report.dropped == {"no-edit": 1}

    def test_local_edit_passes(self, tmp_path):
        base = textured_rgb(11)
        edited = base.copy()
        edited[30:60, 30:60] = 1.0 - edited[30:60, 30:60]
        record = make_record(tmp_path, "edit", base, edited)
        kept, _ = stage_adherence([record], lenient_config())
        assert [r.id for r in kept] == ["edit"]
        assert kept[0].scores["unedited_distance"] == 0.0

    def test_global_drift_drops_preservation(self, tmp_path):
        base = textured_rgb(12, lo=0.3, hi=0.6)
        edited = np.clip(base + 0.08, 0.0, 1.0)  # below diff threshold everywhere
        edited[30:60, 30:60] = 1.0 - edited[30:60, 30:60]
        record = make_record(tmp_path, "drift", base, edited)
        cfg = lenient_config()
        cfg.adherence.pixel_threshold = 0.2
        kept, report = stage_adherence([record], cfg)
        assert kept == []
        assert report.dropped == {"preservation": 1}

    def test_external_mask_passthrough(self, tmp_path):
        base = textured_rgb(13)
        edited = base.copy()
        edited[10:40, 10:40] = 1.0 - edited[10:40, 10:40]
        record = make_record(tmp_path, "masked", base, edited)
        mask = np.zeros((96, 96), dtype=np.uint8)
        mask[10:40, 10:40] = 255
        mask_path = tmp_path / "mask.png"
        Image.fromarray(mask, mode="L").save(mask_path)
        record.mask_path = str(mask_path)
        kept, _ = stage_adherence([record], lenient_config())
        assert [r.id for r in kept] == ["masked"]

    def test_instruction_embedding_enables_alignment_check(self, tmp_path):
        base = textured_rgb(14)
        edited = base.copy()
        edited[20:70, 20:70] = 1.0 - edited[20:70, 20:70]
        good = make_record(tmp_path, "aligned", base, edited, "invert the square")
        bad = make_record(tmp_path, "misaligned", base, edited, "unrelated instruction")
        bad_path = tmp_path / "misaligned_ed.png"  # same edited image

        emb_dir = tmp_path / "emb"
        emb_dir.mkdir()
        embedder = FallbackEmbedder()
        crop = ImageTensor(load_image(good.edited_path).unit()[20:70, 20:70])
        crop_vec = embedder.embed_image(crop)
        write_embedding(emb_dir / f"{text_digest('invert the square')}.emb", crop_vec)
        anti = np.zeros_like(crop_vec)
        anti[0], anti[1] = crop_vec[1], -crop_vec[0]  # orthogonal
        write_embedding(emb_dir / f"{text_digest('unrelated instruction')}.emb", anti)

        cfg = lenient_config()
        cfg.embeddings_dir = str(emb_dir)
        kept, report = stage_adherence([good, bad], cfg)
        assert [r.id for r in kept] == ["aligned"]
        assert report.dropped == {"alignment": 1}
        assert good.scores["edited_alignment"] == pytest.approx(1.0, abs=1e-6)

    def test_missing_instruction_embedding_skips_alignment(self, tmp_path):
        base = textured_rgb(15)
        edited = base.copy()
        edited[20:50, 20:50] = 1.0 - edited[20:50, 20:50]
        record = make_record(tmp_path, "noemb", base, edited)
        cfg = lenient_config()
        cfg.embeddings_dir = str(tmp_path / "empty_emb")
        (tmp_path / "empty_emb").mkdir()
        kept, _ = stage_adherence([record], cfg)
        assert [r.id for r in kept] == ["noemb"]
        assert "edited_alignment" not in kept[0].scores


# ---------------------------------------------------------------------------
# Stage: aesthetic
# ---------------------------------------------------------------------------


class TestStageAesthetic:
    def _records_with_scores(self, n):
        records = []
        for i in range(n):
            r = TripletRecord(
                id=f"r{i:03d}", input_path="x.png", edited_path="y.png", instruction="z"
            )
            r.scores["laion_aesthetic"] = float(i)
            records.append(r)
        return records

    def test_injected_scores_top_fraction_kept(self):
        records = self._records_with_scores(100)
        cfg = PipelineConfig(retention_fraction=0.2, min_file_size=0)
        kept, report = stage_aesthetic(records, cfg)
        assert len(kept) == 20
        assert sorted(r.id for r in kept) == [f"r{i:03d}" for i in range(80, 100)]
        assert report.dropped == {"ranked_out": 80}

    def test_ties_broken_by_id(self):
        records = self._records_with_scores(4)
        for r in records:
            r.scores["laion_aesthetic"] = 1.0
        cfg = PipelineConfig(retention_fraction=0.5, min_file_size=0)
        kept, _ = stage_aesthetic(records, cfg)
        assert sorted(r.id for r in kept) == ["r000", "r001"]

    def test_retention_ceil(self):
        records = self._records_with_scores(5)
        cfg = PipelineConfig(retention_fraction=0.5, min_file_size=0)
        kept, _ = stage_aesthetic(records, cfg)
        assert len(kept) == 3  # ceil(2.5)

    def test_fallback_composite_flagged(self, tmp_path):
        records = []
        for i in range(4):
            r = TripletRecord(
                id=f"f{i}", input_path="x.png", edited_path="y.png", instruction="z"
            )
            r.scores.update(
                {
                    "edited_tenengrad": 0.05 + 0.01 * i,
                    "edited_glcm_entropy": 2.0,
                    "edited_mean_luminance": 0.5,
                }
            )
            records.append(r)
        cfg = PipelineConfig(retention_fraction=0.5, min_file_size=0)
        kept, report = stage_aesthetic(records, cfg)
        assert len(kept) == 2
        assert "fallback_composite_used" in report.notes
        assert sorted(r.id for r in kept) == ["f2", "f3"]

    def test_two_providers_averaged_after_normalization(self):
        records = self._records_with_scores(3)
        # artimuse disagrees; normalized mean decides.
        records[0].scores["artimuse"] = 10.0
        records[1].scores["artimuse"] = 0.0
        records[2].scores["artimuse"] = 5.0
        cfg = PipelineConfig(retention_fraction=0.3, min_file_size=0)
        kept, _ = stage_aesthetic(records, cfg)
        # laion normalized: 0, .5, 1 ; artimuse normalized: 1, 0, .5
        # means: .5, .25, .75 -> r002 wins
        assert [r.id for r in kept] == ["r002"]


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


class TestRunPipeline:
    def test_all_passing_corpus_retention_one_keeps_everything(self, tmp_path):
        records, _ = build_corpus(tmp_path, n_clean=6, n_blur=0, n_exposure=0,
                                  n_duplicate=0, n_noedit=0)
        cfg = lenient_config(parallelism=2)
        kept, report = run_pipeline(records, cfg)
        assert len(kept) == 6
        assert report["output_count"] == 6

    def test_planted_defects_dropped_at_designated_stages(self, tmp_path):
        records, defects = build_corpus(tmp_path, n_clean=8, n_blur=2, n_exposure=2,
                                        n_duplicate=2, n_noedit=2)
        cfg = lenient_config(parallelism=2, retention_fraction=0.5)
        kept, report = run_pipeline(records, cfg)
        by_id = {r.id: r for r in records}
        for rid in defects["duplicate"]:
            assert by_id[rid].stage_verdicts["preliminary"] == "fail"
            assert by_id[rid].drop_reason == "duplicate"
        for rid in defects["blur"]:
            assert by_id[rid].stage_verdicts["quality"] == "fail"
            assert by_id[rid].drop_reason == "sharpness"
        for rid in defects["exposure"]:
            assert by_id[rid].stage_verdicts["quality"] == "fail"
            assert by_id[rid].drop_reason == "exposure"
        for rid in defects["noedit"]:
            assert by_id[rid].stage_verdicts["adherence"] == "fail"
            assert by_id[rid].drop_reason == "no-edit"
        assert len(kept) == 4  # ceil(0.5 * 8)

    def test_stage_composition_order_correct(self, tmp_path):
        records, _ = build_corpus(tmp_path, n_clean=4, n_blur=1, n_exposure=0,
                                  n_duplicate=1, n_noedit=0)
        cfg = lenient_config(parallelism=1)
        _, report = run_pipeline(records, cfg)
        stages = report["stages"]
        assert [s["stage"] for s in stages] == [
            "preliminary", "quality", "adherence", "aesthetic",
        ]
        for prev, cur in zip(stages, stages[1:]):
            assert cur["input_count"] == prev["passed"]

    def test_dropped_records_never_reenter(self, tmp_path):
        records, defects = build_corpus(tmp_path, n_clean=4, n_blur=1, n_exposure=1,
                                        n_duplicate=1, n_noedit=1)
        cfg = lenient_config()
        run_pipeline(records, cfg)
        by_id = {r.id: r for r in records}
        dup = by_id[defects["duplicate"][0]]
        assert set(dup.stage_verdicts) == {"preliminary"}
        blur = by_id[defects["blur"][0]]
        assert set(blur.stage_verdicts) == {"preliminary", "quality"}

    def test_determinism_across_runs(self, tmp_path):
        records, _ = build_corpus(tmp_path, n_clean=6, n_blur=1, n_exposure=1,
                                  n_duplicate=1, n_noedit=1)
        manifest = tmp_path / "in.jsonl"
        save_manifest(records, manifest)
        cfg = lenient_config(parallelism=4, retention_fraction=0.5)
        out1 = tmp_path / "out1.jsonl"
        out2 = tmp_path / "out2.jsonl"
        kept1, report1 = run_pipeline_files(manifest, cfg, out1, tmp_path / "r1.json")
        kept2, report2 = run_pipeline_files(manifest, cfg, out2, tmp_path / "r2.json")
        assert [r.id for r in kept1] == [r.id for r in kept2]
        assert [r.scores for r in kept1] == [r.scores for r in kept2]
        r1 = json.loads((tmp_path / "r1.json").read_text())
        r2 = json.loads((tmp_path / "r2.json").read_text())
        for r in (r1, r2):
            r.pop("generated_at")
            for s in r["stages"]:
                s.pop("wall_time")
        assert r1 == r2

    def test_tightening_thresholds_never_grows_kept_set(self, tmp_path):
        records, _ = build_corpus(tmp_path, n_clean=8, n_blur=2, n_exposure=0,
                                  n_duplicate=0, n_noedit=0)
        manifest = tmp_path / "in.jsonl"
        save_manifest(records, manifest)
        kept_ids = []
        for min_sharp in (0.001, 0.01, 0.2):
            cfg = lenient_config()
            cfg.quality.min_sharpness = min_sharp
            kept, _ = run_pipeline_files(manifest, cfg, tmp_path / "out.jsonl")
            kept_ids.append({r.id for r in kept})
        assert kept_ids[1] <= kept_ids[0]
        assert kept_ids[2] <= kept_ids[1]

    def test_stage_toggles(self, tmp_path):
        records, defects = build_corpus(tmp_path, n_clean=3, n_blur=1, n_exposure=0,
                                        n_duplicate=0, n_noedit=0)
        cfg = lenient_config()
        cfg.stages = ("preliminary", "adherence")
        kept, report = run_pipeline(records, cfg)
        assert [s["stage"] for s in report["stages"]] == ["preliminary", "adherence"]
        assert defects["blur"][0] in {r.id for r in kept}  # quality never ran
