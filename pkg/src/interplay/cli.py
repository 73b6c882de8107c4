"""Command-line entry point.

Exit codes: 0 success, 2 configuration/validation failure, 1 runtime error
(including a failed oracle).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .correspondence import bev_to_img_records, img_to_bev_records
from .errors import ConfigError, StageError
from .io import write_jsonl, write_pgm
from .nn import save_checkpoint
from .scene import save_scene

log = logging.getLogger("interplay")


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "oracle", False):
        cfg.oracle = True
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    cfg.scene.validate()
    scene = pipeline.generate_synthetic_scene(cfg.scene, cfg.seed)
    paths = save_scene(scene, cfg.out_dir)
    print(json.dumps({"points": len(scene.points), "boxes": len(scene.boxes),
                      "files": [str(p) for p in paths]}, indent=1))
    return 0


def cmd_forward(args) -> int:
    cfg = _config(args)
    cfg.validate()
    params = pipeline.build_params(cfg)
    report = pipeline.run_forward(cfg, params)
    if args.dump_params:
        save_checkpoint(params, Path(cfg.out_dir) / "params.bin")
    summary = report.deterministic_dict()
    summary["timings_ms"] = {k: round(v, 2) for k, v in report.timings_ms.items()}
    print(json.dumps(summary, indent=1))
    failed = [k for k, ok in report.checks.items() if not ok]
    if report.oracle is not None and not report.oracle["passed"]:
        failed.append("oracle")
    if failed:
        print(f"invariant checks failed: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_corr(args) -> int:
    cfg = _config(args)
    cfg.validate()
    params = pipeline.build_params(cfg)
    prep = pipeline.prepare(cfg, params)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "corr_img_to_bev.jsonl", img_to_bev_records(prep.img_to_bev))
    write_jsonl(out / "corr_bev_to_img.jsonl", bev_to_img_records(prep.bev_to_img))
    (out / "pillars.json").write_text(json.dumps(prep.pillars.to_dict()))
    for v, (s, d) in enumerate(zip(prep.sparse, prep.dense)):
        write_pgm(out / f"depth_sparse_view{v}.pgm", s.to_bytes_image())
        write_pgm(out / f"depth_dense_view{v}.pgm", d.to_bytes_image())
    stats = pipeline.correspondence_stats(prep)
    (out / "corr_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True))
    print(json.dumps(stats, indent=1))
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    report = pipeline.run_oracle_suite(cfg, corrupt_correspondence=args.corrupt)
    for r in report.results:
        extra = f"  first mismatch: {r.first_mismatch}" if r.first_mismatch is not None else ""
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} {r.detail}{extra}")
    for note in report.notes:
        print(f"note: {note}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle_report.json").write_text(json.dumps(report.to_dict(), indent=1, default=str))
    return 0 if report.passed else 1


def cmd_heatmap(args) -> int:
    cfg = _config(args)
    cfg.validate()
    params = pipeline.build_params(cfg)
    if args.calibrate > 0:
        seeds = range(cfg.seed + 1000, cfg.seed + 1000 + args.calibration_scenes)
        feats, cells = pipeline.calibration_set(cfg, params, seeds)
        params.heat, history = pipeline.calibrate_heatmap(feats, cells, params.heat, steps=args.calibrate, seed=cfg.seed)
        log.info("calibration score %.3f -> %.3f", history[0], history[-1])
    paths = pipeline.dump_heatmaps(cfg, params)
    print(json.dumps([str(p) for p in paths]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interplay", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, oracle=False):
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("-v", "--verbose", action="store_true", help="log stage timings")
        if oracle:
            p.add_argument("--oracle", action="store_true", help="also compare fast paths with loop oracles")
        return p

    common(sub.add_parser("synth", help="generate a synthetic scene (JSON + PGM)")).set_defaults(func=cmd_synth)
    p = common(sub.add_parser("forward", help="run the full pipeline"), oracle=True)
    p.add_argument("--dump-params", action="store_true", help="write the weight checkpoint too")
    p.set_defaults(func=cmd_forward)
    common(sub.add_parser("corr", help="dump correspondence maps and stats")).set_defaults(func=cmd_corr)
    p = common(sub.add_parser("oracle", help="run the brute-force oracle suite"))
    p.add_argument("--corrupt", action="store_true", help="corrupt one correspondence (fault-injection hook)")
    p.set_defaults(func=cmd_oracle)
    p = common(sub.add_parser("heatmap", help="dump BEV heatmaps before/after the encoder"))
    p.add_argument("--calibrate", type=int, default=0, metavar="STEPS",
                   help="random-search calibration steps for the heatmap map (0 = off)")
    p.add_argument("--calibration-scenes", type=int, default=80)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not (0 <= args.seed < 2**64):
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, ConfigError) else 1
    except Exception as e:  # noqa: BLE001 - top-level exit code mapping
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
