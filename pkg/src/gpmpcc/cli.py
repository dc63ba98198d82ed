"""``gpmpcc`` command line: run, replay, export, validate-config.

Exit codes: 0 success, 1 usage error, 2 runtime failure (bad config, IO,
controller or lap failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import gp as gpmod
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiment import (atomic_write_text, export, lap_time_reduction, load_log, replay, run_batch,
                         run_experiment)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpmpcc", description="Learning-based contouring MPC experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment INI file")
        sp.add_argument("--quiet", action="store_true", help="only print errors")

    r = sub.add_parser("run", help="drive the lap protocol and write logs and summaries")
    common(r)
    r.add_argument("--seed", type=int, help="override protocol.seed")
    r.add_argument("--seeds", type=_seed_list, help="batch mode: comma-separated seeds, one output directory each")
    r.add_argument("--workers", type=int, default=1, help="parallel workers in batch mode")
    r.add_argument("--laps", type=int, help="override protocol.laps")
    r.add_argument("--out", help="override paths.output")

    rp = sub.add_parser("replay", help="model-error table for a step log against a dictionary snapshot")
    common(rp)
    rp.add_argument("log", help="step log CSV")
    rp.add_argument("--dataset", help="dictionary CSV; omit for the nominal model only")
    rp.add_argument("--out", help="write the table as JSON here")

    ex = sub.add_parser("export", help="plot-data CSVs from a step log")
    common(ex, config_required=False)
    ex.add_argument("log", help="step log CSV")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--boundary-samples", type=int, default=400)

    v = sub.add_parser("validate-config", help="check a config file and print its resolved form")
    common(v)
    return p


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def _lap_line(m) -> str:
    gp = "-" if m.e_vy_gp is None else f"{m.e_vy_gp[0]:.4f}"
    flag = "" if m.completed else "  DNF"
    return (f"lap {m.lap:2d}  time {m.lap_time:8.2f} s  updates {m.dict_updates:3d}  size {m.dict_size:3d}  "
            f"e_vy nom {m.e_vy_nom[0]:.4f} gp {gp}  max ay {m.max_ay_g:.2f} g{flag}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg = cfg.with_overrides(laps=args.laps, output=args.out)
        out = Path(cfg.paths.output)
        results = run_batch(cfg, args.seeds, out, workers=args.workers)
        code = EXIT_OK
        for seed, (metrics, err) in results.items():
            if err or not metrics:
                print(f"seed {seed}: {err}", file=sys.stderr)
                code = EXIT_FAIL
            else:
                red = lap_time_reduction(metrics) if len(metrics) > 1 else 0.0
                _say(args, f"seed {seed}: {len(metrics)} laps, last {metrics[-1].lap_time:.2f} s, "
                           f"reduction {100 * red:.2f}%")
        return code
    cfg = cfg.with_overrides(seed=args.seed, laps=args.laps, output=args.out)
    out = Path(cfg.paths.output)
    res = run_experiment(cfg, out, progress=lambda m: _say(args, _lap_line(m)))
    if res.error:
        print(f"gpmpcc run: {res.error}", file=sys.stderr)
        return EXIT_FAIL
    _say(args, f"wrote {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args.config)
    log = load_log(args.log)
    ds = gpmod.load_dataset(args.dataset, budget=cfg.gp.budget) if args.dataset else None
    table = replay(log, cfg, ds)
    text = json.dumps(table, indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    if not args.quiet:
        for k, v in table.items():
            print(f"{k:20s} {v:.6g}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    log = load_log(args.log)
    if len(log) == 0:
        raise ValueError("step log has no rows")
    for p in export(log, cfg, args.out, args.boundary_samples):
        _say(args, f"wrote {p}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    _say(args, dump_config(cfg).rstrip())
    return EXIT_OK


COMMANDS = {"run": cmd_run, "replay": cmd_replay, "export": cmd_export, "validate-config": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gpmpcc {args.command}: invalid config", file=sys.stderr)
        for line in exc.problems:
            print(f"  {line}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError, RuntimeError, gpmod.GpFitError) as exc:
        print(f"gpmpcc {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
