"""Command line: ``ldpflow <subcommand> --config <path> [--out <dir>] [--seed <n>]``.

Exit status 0 when every declared invariant holds, 1 when one fails (the
failures are written to ``failures.json``), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

from .config import load_config
from .errors import ConfigError
from .experiments import RUNNERS

log = logging.getLogger("ldpflow")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def _cell(v) -> str:
    if v is None:
        return ""
    if hasattr(v, "item"):  # numpy scalar
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _versions() -> dict:
    import numpy
    import scipy

    from . import __version__

    out = {"ldpflow": __version__, "python": platform.python_version(),
           "numpy": numpy.__version__, "scipy": scipy.__version__}
    try:
        from importlib.metadata import version

        out["pot"] = version("pot")
    except Exception:
        pass
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="INI file overriding the defaults")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {} if args.seed is None else {"run.seed": str(args.seed)}
    try:
        cfg = load_config(args.config, overrides)
        out = args.out or Path("runs") / args.command
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        report = RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - start
    csv_path = out / f"{report.name}.csv"
    write_csv(csv_path, report.header, report.rows)
    manifest = {
        "command": args.command,
        "config_path": cfg.source,
        "config": cfg.echo(),
        "versions": _versions(),
        "wall_seconds": wall,
        "timings": report.timings,
        "outputs": [csv_path.name],
        "invariants_passed": not report.failures,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    failures_path = out / "failures.json"
    if report.failures:
        with open(failures_path, "w") as fh:
            json.dump(report.failures, fh, indent=2, sort_keys=True)
        for f in report.failures:
            log.warning("invariant failed: %s", f["invariant"])
        print(f"{args.command}: {len(report.failures)} invariant(s) failed; see {failures_path}",
              file=sys.stderr)
        return EXIT_INVARIANT
    if failures_path.exists():
        failures_path.unlink()
    print(f"{args.command}: ok ({csv_path})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
