"""Command-line entry point: ``twinzone <subcommand> [--config PATH] [--seed S] [--out DIR] [--noiseless]``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import ConfigError, load_config, prepare_seed, run_bound_audit, run_calibration_cdf, \
    run_pilot_sweep, run_rank_sweep, write_manifest, write_scene_artifacts, write_zone_artifacts

SUBCOMMANDS = ("synth", "zone", "sweep", "calibrate", "audit", "all")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="JSON config path, or 'default'")
    common.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config list")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")
    common.add_argument("--noiseless", action="store_true", help="disable measurement noise")
    parser = argparse.ArgumentParser(prog="twinzone", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _run(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seeds = [args.seed]
    if args.noiseless:
        cfg.noiseless = True
    if args.out is not None:
        cfg.output_dir = args.out
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    cmd = args.command
    contexts = None
    if cmd in ("synth", "zone", "all"):
        contexts = {s: prepare_seed(cfg, s) for s in cfg.seeds}
        for ctx in contexts.values():
            write_scene_artifacts(ctx, out, channels=(cmd == "synth"))
            if cmd != "synth":
                write_zone_artifacts(ctx, out)
    if cmd in ("sweep", "all"):
        contexts = contexts or {s: prepare_seed(cfg, s) for s in cfg.seeds}
        run_pilot_sweep(cfg, out, contexts)
        run_rank_sweep(cfg, out, contexts)
    if cmd in ("calibrate", "all"):
        contexts = contexts or {s: prepare_seed(cfg, s) for s in cfg.seeds}
        run_calibration_cdf(cfg, out, contexts)
    if cmd in ("audit", "all"):
        contexts = contexts or {s: prepare_seed(cfg, s) for s in cfg.seeds}
        run_bound_audit(cfg, out, contexts)
    write_manifest(cfg, out, cmd)


def main_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("twinzone: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        _run(args)
    except ConfigError as exc:
        print(f"twinzone: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"twinzone: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(main_cli())


if __name__ == "__main__":
    main()
