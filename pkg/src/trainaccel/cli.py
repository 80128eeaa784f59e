"""Command line entry point: ``trainaccel run | ablate | verify | presets``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .config import list_presets, load_config
from .errors import ConfigError, DivergenceError, FormatError
from .harness import CSV_COLUMNS, csv_rows, emit_report, parse_grid, run_ablation, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _on_off(text):
    low = text.lower()
    if low not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return low == "on"


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's default 2 means divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="trainaccel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--config", required=True, help="config file or preset name")
    run.add_argument("--ga-steps", type=int)
    run.add_argument("--amp", type=_on_off)
    run.add_argument("--prefetch", type=int, metavar="K", help="staging buffers (1 = no prefetch)")
    run.add_argument("--pin-policy", type=_on_off)
    run.add_argument("--seed", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=("json", "csv"), default="json")

    ab = sub.add_parser("ablate", help="run the with/without technique grid")
    ab.add_argument("--config", required=True)
    ab.add_argument("--grid", default="ga,amp,prefetch",
                    help="comma list -> full factorial; 'none;ga+amp' -> explicit combos")
    ab.add_argument("--out", required=True, help="output directory")
    ab.add_argument("--seed", type=int)

    sub.add_parser("verify", help="run the built-in property checks")
    sub.add_parser("presets", help="list bundled presets")
    return p


def _overrides(args):
    ov = {}
    if getattr(args, "ga_steps", None) is not None:
        ov["ga_steps"] = args.ga_steps
    if getattr(args, "amp", None) is not None:
        ov["amp_enabled"] = args.amp
    if getattr(args, "prefetch", None) is not None:
        ov["prefetch.k_buffers"] = args.prefetch
    if getattr(args, "pin_policy", None) is not None:
        ov["prefetch.pin_policy"] = args.pin_policy
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        ov["epochs"] = args.epochs
    return ov


def _summary(rep):
    return (f"{rep.run_id}: acc={rep.accuracy:.2f}% f1={rep.macro_f1:.2f}% "
            f"time={rep.exec_time:.3f}s throughput={rep.throughput:.3g} ops/s"
            + (f" speedup={rep.speedup_vs_baseline:.2f}x" if rep.speedup_vs_baseline else ""))


def cmd_run(args):
    cfg = load_config(args.config).with_overrides(_overrides(args))
    if args.out and not Path(args.out).resolve().parent.is_dir():
        # fail before training rather than after
        raise OSError(f"cannot write report to {args.out}: parent directory does not exist")
    rep = train(cfg)
    print(_summary(rep), file=sys.stderr)
    if args.out:
        emit_report(rep, args.format, args.out)
    elif args.format == "json":
        json.dump(rep.to_dict(), sys.stdout, indent=2)
        print()
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(csv_rows(rep))
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config).with_overrides(_overrides(args))
    grid = parse_grid(args.grid)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    table = run_ablation(cfg, grid)
    for row in table.rows:
        if row.report is None:
            print(f"{row.run_id}: FAILED {row.error}")
        else:
            print(_summary(row.report))
    emit_report(table, "json", out / "ablation.json")
    emit_report(table, "csv", out / "ablation.csv")
    print(f"wrote {out / 'ablation.json'} and {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_all
    print(f"kernel backend: {kernels.backend_name()}")
    results = run_all()
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_DIVERGED


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "verify":
            return cmd_verify(args)
        for name in list_presets():
            print(name)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostic, indent=2, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
