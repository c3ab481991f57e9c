"""Command line entry point: ``mapfuse <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import ConfigError, MapFuseError
from .synthetic import SceneSpec, generate_scene, hard_spec

log = logging.getLogger("mapfuse")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    kw = {}
    if getattr(args, "threads", None) is not None:
        kw["threads"] = args.threads
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "no_refine", False):
        kw["refine"] = False
    if getattr(args, "debug", False):
        kw["debug"] = True
    if getattr(args, "out", None):
        kw["output_dir"] = str(args.out)
    try:
        return cfg.replace(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    return Path(out)


def cmd_synth(args, cfg):
    from .pipeline import write_dataset

    out = _out_dir(args, cfg)
    seeds = [cfg.seed + k for k in range(args.scenes)]
    for k, seed in enumerate(seeds):
        spec = hard_spec(seed, n_cameras=args.cameras) if args.hard else SceneSpec(seed=seed, n_cameras=args.cameras)
        target = out if args.scenes == 1 else out / f"scene_{k:03d}"
        write_dataset(generate_scene(spec), target, args.noise, seed)
    print(json.dumps({"ok": True, "scenes": len(seeds), "out": str(out)}))


def cmd_localize(args, cfg):
    from .pipeline import run_localize

    path = run_localize(args.dataset, cfg, _out_dir(args, cfg))
    print(json.dumps({"ok": True, "positions": str(path)}))


def cmd_heights(args, cfg):
    from .pipeline import run_heights

    out = _out_dir(args, cfg)
    results, votes = run_heights(args.dataset, cfg, out)
    print(json.dumps({"ok": True, "images": len(results), "heights": str(out / "heights.csv")}))


def cmd_masks(args, cfg):
    from .pipeline import read_heights_csv, read_positions_csv, run_masks

    out = _out_dir(args, cfg)
    heights = read_heights_csv(args.heights or out / "heights.csv")
    pos_file = args.positions or out / "refined_positions.csv"
    positions = read_positions_csv(pos_file) if Path(pos_file).exists() else None
    run_masks(args.dataset, cfg, out, heights, positions)
    print(json.dumps({"ok": True, "masks": str(out / "masks")}))


def cmd_pipeline(args, cfg):
    from .pipeline import run_pipeline

    summary = run_pipeline(args.dataset, cfg, _out_dir(args, cfg))
    print(json.dumps({"ok": True, "summary": summary}, sort_keys=True))


def cmd_evaluate(args, cfg):
    from .pipeline import evaluate_run, format_report

    run = _out_dir(args, cfg)
    metrics = evaluate_run(args.dataset, run)
    baseline = evaluate_run(args.dataset, args.baseline) if args.baseline else None
    if baseline:
        metrics["baseline"] = baseline
    (run / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(format_report(metrics, baseline))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapfuse", description="Fuse footprint maps with street-level photos.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--threads", type=int, help="worker processes")
        sp.add_argument("--seed", type=int)
        if dataset:
            sp.add_argument("--dataset", type=Path, required=True)
        return sp

    sp = common(sub.add_parser("synth", help="write synthetic datasets"), dataset=False)
    sp.add_argument("--scenes", type=int, default=1)
    sp.add_argument("--cameras", type=int, default=2)
    sp.add_argument("--noise", type=float, default=5.0, help="position noise radius in meters")
    sp.add_argument("--hard", action="store_true", help="low contrast, occluders, gain and noise")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("localize", help="voting-based position refinement"))
    sp.add_argument("--no-refine", action="store_true")
    sp.set_defaults(func=cmd_localize)

    sp = common(sub.add_parser("heights", help="joint localization and height estimation"))
    sp.add_argument("--no-refine", action="store_true")
    sp.add_argument("--debug", action="store_true", help="also dump edgeness and region images")
    sp.set_defaults(func=cmd_heights)

    sp = common(sub.add_parser("masks", help="render facade masks and export models"))
    sp.add_argument("--heights", type=Path, help="heights CSV (default: OUT/heights.csv)")
    sp.add_argument("--positions", type=Path, help="positions CSV (default: OUT/refined_positions.csv)")
    sp.set_defaults(func=cmd_masks)

    sp = common(sub.add_parser("pipeline", help="run every stage"))
    sp.add_argument("--no-refine", action="store_true")
    sp.add_argument("--debug", action="store_true")
    sp.set_defaults(func=cmd_pipeline)

    sp = common(sub.add_parser("evaluate", help="score a run against dataset truth"))
    sp.add_argument("--baseline", type=Path, help="second run to report deltas against")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (MapFuseError, OSError) as exc:
        from .pipeline import error_report

        report = error_report(exc)
        print(json.dumps(report), file=sys.stderr)
        out = getattr(args, "out", None)
        if out is not None and Path(out).is_dir():
            (Path(out) / "error.json").write_text(json.dumps(report, indent=1) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
