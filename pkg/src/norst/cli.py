"""Command line entry point: ``norst <subcommand> [--config FILE] ...``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ConfigError
from .datagen import assemble_scene, export_csv, save_scene

log = logging.getLogger("norst")

COMMANDS = ("curve", "phase", "xmin", "pca-sddn", "st-miss", "gen-scene")


def build_parser():
    ap = argparse.ArgumentParser(prog="norst", description="Robust subspace tracking experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="experiment config file")
        p.add_argument("--seed", type=int, help="override experiment seed")
        p.add_argument("--trials", type=int, help="override number of trials")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker processes (default ${harness.THREADS_ENV} or 1)")
        if name == "gen-scene":
            p.add_argument("--csv", action="store_true", help="also export Y and L as CSV")
    return ap


def load(args):
    if args.config is None:
        cfg = harness.desk_config()
    else:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, str(args.config)) from None
        cfg = harness.load_config(text, source=str(args.config))
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1", None, "<command line>")
        kw["trials"] = args.trials
    if args.out is not None:
        kw["output_dir"] = str(args.out)
    return replace(cfg, **kw) if kw else cfg


def run_command(command, cfg, threads, args):
    out = Path(cfg.output_dir)
    extra = {}
    if command == "curve":
        res = harness.run_error_curve(cfg, out, threads)
        files = res.files
        extra["late_changes"] = {o.trial: o.late_changes for o in res.trials if o.late_changes}
    elif command == "phase":
        ph = cfg.phase
        _, files = harness.run_phase_transition(ph.b0_grid, ph.r_grid, cfg.trials, cfg, out, threads)
    elif command == "xmin":
        _, files = harness.run_xmin_study(cfg.xmin.values, cfg, out, threads)
    elif command == "pca-sddn":
        _, files = harness.run_pca_sddn(cfg, out)
    elif command == "st-miss":
        _, _, files = harness.run_st_missing(cfg, out, threads)
    elif command == "gen-scene":
        scene = assemble_scene(replace(cfg.scene, seed=cfg.seed))
        out.mkdir(parents=True, exist_ok=True)
        files = [save_scene(scene, out / "scene.bin") or out / "scene.bin"]
        if args.csv:
            for name, M in (("Y", scene.Y), ("L", scene.L)):
                export_csv(M, out / f"{name}.csv")
                files.append(out / f"{name}.csv")
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(command)
    return files, extra


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    threads = args.threads if args.threads is not None else harness.default_threads()
    t0 = time.perf_counter()
    try:
        files, extra = run_command(args.command, cfg, threads, args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - t0
    harness.write_manifest(cfg.output_dir, args.command, cfg, files, wall, extra)
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
