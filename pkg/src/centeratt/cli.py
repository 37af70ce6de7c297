"""``centeratt`` command-line interface.

Exit codes: 0 success, 1 generic package error, 2 usage or config error,
3 shape error, 4 weight-file problem, 5 fp16 overflow, 6 scene placement
failure, 7 malformed scene file, 8 missing inputs, 9 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .bench import profile_pipeline, write_report
from .config import PipelineConfig, load_config
from .errors import CenterAttError, ConfigError, MissingInputError
from .evaluation import evaluate
from .optimize import equivalence_check, fold_store
from .pipeline import ABLATION_VARIANTS, Pipeline, Variant, init_pipeline_weights, variant_by_name
from .scene import (generate_scene, read_labels, read_manifest, write_labels,
                    write_manifest, write_scene)
from .weights import read_weights, write_weights

IO_EXIT = 9
WORKERS_ENV = "CENTERATT_WORKERS"


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    workers = resolve_workers(getattr(args, "workers", None), cfg.workers)
    overrides = {"workers": workers}
    if getattr(args, "oracle", False):
        overrides["mode"] = "oracle"
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_workers(flag: Optional[int], default: int = 1) -> int:
    """Flag beats the environment variable, which beats the config value."""
    if flag is not None:
        value = flag
    elif os.environ.get(WORKERS_ENV):
        try:
            value = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from None
    else:
        value = default
    if value < 1:
        raise ConfigError("worker count must be >= 1")
    return value


def _store(args, cfg: PipelineConfig):
    if cfg.mode == "oracle" and not args.weights:
        return None
    if not args.weights:
        raise ConfigError("learned mode needs --weights (or pass --oracle)")
    return read_weights(args.weights)


def _selected_variants(args) -> List[Variant]:
    precision = "fp16" if args.fp16 else "fp32"
    selection = getattr(args, "variants", None)
    if selection:
        names = [v.name for v in ABLATION_VARIANTS] if selection == "all" else selection.split(",")
        base = [variant_by_name(n.strip()) for n in names]
    else:
        if args.no_second_stage:
            second = "none"
        else:
            second = "centeratt" if args.centeratt else "baseline"
        name = "1stage" if second == "none" else ("centeratt" if second == "centeratt"
                                                  else "baseline")
        if args.fpn and second != "none":
            name = "fpn" if second == "baseline" else "centeratt+fpn"
        base = [Variant(name, second, fpn=args.fpn)]
    out = []
    for v in base:
        suffix = "".join(s for s, on in (("+foldbn", args.fold_bn), ("+fp16", args.fp16)) if on)
        out.append(Variant(v.name + suffix, v.second_stage, v.fpn, precision, args.fold_bn))
    return out


def _entries(manifest):
    try:
        return read_manifest(manifest)
    except OSError as exc:
        raise MissingInputError(f"cannot read manifest {manifest}: {exc}") from exc


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = cfg.seed + i
        scene = generate_scene(replace(cfg.scene, seed=seed))
        entries.append(write_scene(out, f"scene_{i:04d}", scene))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    print(f"wrote {len(entries)} scene(s) and {manifest}")
    return 0


def _detect_variant(cfg, variant, store, entries, out_dir: Path, threshold):
    pipe = Pipeline(cfg, variant, store, threshold)
    out_dir.mkdir(parents=True, exist_ok=True)
    dets, gts = [], []
    t0 = time.perf_counter()
    for e in entries:
        boxes = pipe.run_entry(e)
        write_labels(out_dir / f"{e.scene_id}.txt", boxes)
        dets.append(boxes)
    elapsed = time.perf_counter() - t0
    for e in entries:
        gts.append(read_labels(e.labels))
    return dets, gts, elapsed


def cmd_detect(args) -> int:
    cfg = _config(args)
    store = _store(args, cfg)
    entries = _entries(args.manifest)
    variants = _selected_variants(args)
    out = Path(args.out)
    rows = ["variant,scenes,detections,mAP,mAPH,seconds"]
    for v in variants:
        target = out / v.name if len(variants) > 1 else out
        dets, gts, elapsed = _detect_variant(cfg, v, store, entries, target, args.score_threshold)
        res = evaluate(dets, gts, cfg.eval)
        rows.append(f"{v.name},{len(entries)},{sum(map(len, dets))},{100 * res.mAP:.1f},"
                    f"{100 * res.mAPH:.1f},{elapsed:.2f}")
    text = "\n".join(rows) + "\n"
    if len(variants) > 1:
        out.mkdir(parents=True, exist_ok=True)
        (out / "variants.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    store = _store(args, cfg)
    entries = _entries(args.manifest)
    if not entries:
        raise MissingInputError("manifest lists no scenes")
    reports = []
    for v in _selected_variants(args):
        pipe = Pipeline(cfg, v, store, args.score_threshold)
        rep = profile_pipeline(pipe.stage_functions(), entries, args.runs, args.warmup, v.name)
        dets = [pipe.run_entry(e) for e in entries]
        rep.quality = 100 * evaluate(dets, [read_labels(e.labels) for e in entries],
                                     cfg.eval).mAPH
        reports.append(rep)
    csv, table = write_report(reports[0], reports[1:], args.budget_ms)
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(table if not args.csv else csv)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    entries = _entries(args.manifest)
    det_dir = Path(args.detections)
    missing = [e.scene_id for e in entries if not (det_dir / f"{e.scene_id}.txt").exists()]
    if missing:
        raise MissingInputError("no detections for scene(s): " + ", ".join(missing))
    dets = [read_labels(det_dir / f"{e.scene_id}.txt") for e in entries]
    gts = [read_labels(e.labels) for e in entries]
    csv = evaluate(dets, gts, cfg.eval).to_csv()
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    return 0


def cmd_fold_bn(args) -> int:
    store = read_weights(args.weights)
    folded = fold_store(store)
    write_weights(args.out, folded)
    print(f"folded {(len(store) - len(folded)) // 4} batch-norm layer(s) into {args.out}")
    return 0


def cmd_compare_precision(args) -> int:
    cfg = _config(args)
    store = _store(args, cfg)
    entries = _entries(args.manifest)
    base = variant_by_name(args.variant) if args.variant else Variant("centeratt")
    a = Pipeline(cfg, Variant(base.name, base.second_stage, base.fpn, "fp32", args.fold_bn),
                 store, args.score_threshold)
    b = Pipeline(cfg, Variant(base.name + "+fp16", base.second_stage, base.fpn, "fp16",
                              args.fold_bn), store, args.score_threshold)
    scenes = [(e.scene_id, e) for e in entries]
    report = equivalence_check(a, b, scenes, args.tolerance)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def cmd_init_weights(args) -> int:
    cfg = _config(args)
    store = init_pipeline_weights(cfg, args.seed)
    write_weights(args.out, store)
    print(f"wrote {len(store)} tensors to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------


def _common(p, manifest=True):
    p.add_argument("--config", help="pipeline config file (key = value lines)")
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker threads; overrides ${WORKERS_ENV} and the config")
    if manifest:
        p.add_argument("--manifest", required=True, help="scene manifest from 'generate'")


def _model_flags(p, variants=True):
    p.add_argument("--weights", help="CATW weight file (required unless --oracle)")
    p.add_argument("--oracle", action="store_true",
                   help="replace the backbone with ground-truth head targets")
    p.add_argument("--centeratt", action="store_true",
                   help="use the attention second stage instead of the per-proposal MLP")
    p.add_argument("--fpn", action="store_true", help="pool ROI features from all FPN scales")
    p.add_argument("--no-second-stage", action="store_true",
                   help="emit first-stage proposals directly")
    p.add_argument("--fp16", action="store_true", help="run under emulated half precision")
    p.add_argument("--fold-bn", action="store_true", help="fold batch norm into weights first")
    p.add_argument("--score-threshold", type=float, default=0.1,
                   help="keep detections scoring above this value (default 0.1)")
    if variants:
        p.add_argument("--variants", default=None,
                       help="'all' or comma-separated names among baseline, centeratt, fpn, "
                            "centeratt+fpn; overrides the variant flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="centeratt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic scenes and a manifest")
    _common(p, manifest=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10, help="number of scenes (default 10)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="run a detector variant over a manifest")
    _common(p)
    _model_flags(p)
    p.add_argument("--out", required=True, help="directory for per-scene detection files")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="profile the five pipeline stages")
    _common(p)
    _model_flags(p)
    p.add_argument("--runs", type=int, default=3, help="timed runs (default 3)")
    p.add_argument("--warmup", type=int, default=1, help="discarded warm-up runs (default 1)")
    p.add_argument("--budget-ms", type=float, default=None,
                   help="informational latency budget; marks rows within/over")
    p.add_argument("--out", help="write the latency CSV here")
    p.add_argument("--csv", action="store_true", help="print CSV instead of the text table")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="AP/APH of detection files against ground truth")
    _common(p)
    p.add_argument("--detections", required=True, help="directory of <scene_id>.txt files")
    p.add_argument("--out", help="also write the metric CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fold-bn", help="fold batch norm into a new weight file")
    p.add_argument("--weights", required=True, help="input CATW file")
    p.add_argument("--out", required=True, help="output CATW file")
    p.set_defaults(func=cmd_fold_bn)

    p = sub.add_parser("compare-precision", help="fp32 vs fp16 equivalence report")
    _common(p)
    p.add_argument("--weights", help="CATW weight file (required unless --oracle)")
    p.add_argument("--oracle", action="store_true", help="ground-truth head targets")
    p.add_argument("--variant", default=None, help="ablation variant (default centeratt)")
    p.add_argument("--fold-bn", action="store_true", help="fold batch norm in both pipelines")
    p.add_argument("--score-threshold", type=float, default=0.1,
                   help="detection threshold (default 0.1)")
    p.add_argument("--tolerance", type=float, default=1e-2,
                   help="max relative difference that still passes (default 1e-2)")
    p.add_argument("--out", help="write the report CSV here")
    p.set_defaults(func=cmd_compare_precision)

    p = sub.add_parser("init-weights", help="write randomly initialised weights")
    _common(p, manifest=False)
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: config seed)")
    p.add_argument("--out", required=True, help="output CATW file")
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CenterAttError as exc:
        print(f"centeratt {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"centeratt {args.command}: error: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
