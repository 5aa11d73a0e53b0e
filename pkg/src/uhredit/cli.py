"""Command-line entry point.

    curate run       --manifest in.jsonl --out out.jsonl [--report r.json]
    curate stage     <name> --manifest in.jsonl --out out.jsonl
    curate pfid      --real DIR --gen DIR [--patch N --stride N ...]
    curate numerics  selftest

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 empty
output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import numerics, pipeline
from .images import load_image
from .manifest import ManifestError
from .pfid import PatchConfig, pfid
from .providers import DirectoryPatchFeatures, FallbackPatchFeatures

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_EMPTY = 3


def _load_config(path: str | None, workers: int | None, seed: int | None) -> pipeline.PipelineConfig:
    obj = {}
    if path:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise pipeline.ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = pipeline.PipelineConfig.from_dict(obj)
    if workers is not None:
        cfg.parallelism = workers
    if seed is not None:
        cfg.seed = seed
    return cfg


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config(args.config, args.workers, args.seed)
        if args.stage:
            cfg.stages = (args.stage,)
            if args.stage not in pipeline.STAGE_ORDER:
                raise pipeline.ConfigError(f"unknown stage {args.stage!r}")
    except pipeline.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        kept, report = pipeline.run_pipeline_files(
            args.manifest, cfg, args.out, args.report
        )
    except (ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for stage in report["stages"]:
        dropped = sum(stage["dropped"].values())
        print(
            f"{stage['stage']}: {stage['input_count']} in, "
            f"{stage['passed']} passed, {dropped} dropped"
        )
    print(f"kept {len(kept)} of {report['input_count']} records -> {args.out}")
    if not kept:
        return EXIT_EMPTY
    return EXIT_OK


def _iter_images(root: str):
    paths = sorted(
        p for p in Path(root).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    return [load_image(p) for p in paths]


def _cmd_pfid(args: argparse.Namespace) -> int:
    try:
        cfg = PatchConfig(
            patch_size=args.patch,
            stride=args.stride,
            max_patches_per_image=args.max_patches,
            sampling=args.sampling,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    features = (
        FallbackPatchFeatures()
        if args.features == "builtin"
        else DirectoryPatchFeatures(args.features)
    )
    try:
        real = _iter_images(args.real)
        gen = _iter_images(args.gen)
        report = pfid(real, gen, features, cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    payload = report.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _cmd_numerics(args: argparse.Namespace) -> int:
    if args.action != "selftest":
        print(f"unknown numerics action {args.action!r}", file=sys.stderr)
        return EXIT_CONFIG
    results = numerics.selftest()
    failed = 0
    for name, passed, detail in results:
        status = "ok" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{status:4s} {name}{suffix}")
        failed += 0 if passed else 1
    if failed:
        print(f"{failed} invariant check(s) failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full filtering pipeline")
    run.add_argument("--manifest", required=True)
    run.add_argument("--config", default=None, help="JSON pipeline config")
    run.add_argument("--out", required=True)
    run.add_argument("--report", default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.set_defaults(func=_cmd_run, stage=None)

    stage = sub.add_parser("stage", help="run a single pipeline stage")
    stage.add_argument("stage", choices=pipeline.STAGE_ORDER)
    stage.add_argument("--manifest", required=True)
    stage.add_argument("--config", default=None)
    stage.add_argument("--out", required=True)
    stage.add_argument("--report", default=None)
    stage.add_argument("--workers", type=int, default=None)
    stage.add_argument("--seed", type=int, default=None)
    stage.set_defaults(func=_cmd_run)

    fid = sub.add_parser("pfid", help="patch-FID between two image directories")
    fid.add_argument("--real", required=True)
    fid.add_argument("--gen", required=True)
    fid.add_argument("--patch", type=int, default=512)
    fid.add_argument("--stride", type=int, default=512)
    fid.add_argument("--max-patches", type=int, default=64)
    fid.add_argument("--sampling", choices=("raster", "random"), default="raster")
    fid.add_argument("--features", default="builtin", help="'builtin' or an EMB1 directory")
    fid.add_argument("--seed", type=int, default=0)
    fid.add_argument("--out", default=None)
    fid.set_defaults(func=_cmd_pfid)

    num = sub.add_parser("numerics", help="numerics kernel utilities")
    num.add_argument("action", choices=("selftest",))
    num.set_defaults(func=_cmd_numerics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
