"""``resist`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import DataError, InvalidArgument, NumericalError
from .commands import cmd_bench, cmd_calibrate, cmd_evaluate, cmd_robustness, cmd_simulate
from .config import SOLVERS, RunConfig, load_config, load_params
from .synth import DatasetManifest, synth_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
VERBS = ("simulate", "calibrate", "evaluate", "bench", "robustness", "synth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resist", description="Physical photoresist simulation and calibration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        if verb == "synth":
            p.add_argument("--count", type=int, default=64, help="number of tiles")
            p.add_argument("--tile-px", type=int, default=128)
            p.add_argument("--pitch-nm", type=float, default=7.0)
            p.add_argument("--fine-pitch-nm", type=float, default=1.0,
                           help="pitch of the extra fine ground truth; 0 disables it")
            continue
        p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
        p.add_argument("--solver", choices=SOLVERS)
        p.add_argument("--resolution", type=float, help="output pitch in nm")
        if verb != "calibrate":
            p.add_argument("--params", type=Path, help="fitted parameter file (default: config params)")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = str(args.out)
    if getattr(args, "solver", None):
        updates["solver"] = args.solver
    if getattr(args, "resolution", None) is not None:
        if not args.resolution > 0:
            raise UsageError("--resolution must be positive")
        updates["resolution_nm"] = args.resolution
    if getattr(args, "params", None) is not None:
        updates["params"] = load_params(args.params)[0]
    return replace(cfg, **updates) if updates else cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _resolve_config(args)
    out = Path(cfg.out)
    if args.verb == "synth":
        if args.count < 1 or args.tile_px < 1 or not args.pitch_nm > 0:
            raise UsageError("--count, --tile-px and --pitch-nm must be positive")
        man = synth_dataset(out, seed=cfg.seed, count=args.count, tile_px=args.tile_px,
                            pitch_nm=args.pitch_nm, fine_pitch_nm=args.fine_pitch_nm or None)
        result = {"manifest": str(man.path), "tiles": len(man.tiles),
                  "calibration": len(man.split("calibration"))}
    else:
        man = DatasetManifest.load(args.manifest)
        if args.verb == "simulate":
            result = cmd_simulate(cfg, man, cfg.params, out)
        elif args.verb == "calibrate":
            result = cmd_calibrate(cfg, man, out)
        elif args.verb == "evaluate":
            result = cmd_evaluate(cfg, man, cfg.params, out)
        elif args.verb == "bench":
            result = cmd_bench(cfg, man, cfg.params, out)
        else:
            result = cmd_robustness(cfg, man, cfg.params, out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"resist: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidArgument, OSError) as exc:
        print(f"resist: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"resist: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
