"""Command line entry point ``hcm``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import load_config_file
from .core import ConfigError, HcmError
from .geometry import export_geometry
from .harness import OUTPUT_DIR_ENV, RunError, build_geometry, run, summarize

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _bands(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad band list {text!r}") from exc


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcm", description="Hybrid geometry-based channel simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a simulation")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_DIR_ENV})")
    r.add_argument("--seed-override", type=int, default=None)
    r.add_argument("--band-filter", type=_bands, default=None, help="comma separated carrier frequencies in Hz")
    r.add_argument("--summarize", action="store_true", help="also write the statistics report")

    s = sub.add_parser("summarize", help="statistics report for a finished run")
    s.add_argument("--out", default=None)
    s.add_argument("--no-figures", action="store_true")

    v = sub.add_parser("validate-config", help="parse and validate a configuration file")
    v.add_argument("--config", required=True)

    g = sub.add_parser("export-geometry", help="write the geometry layers of a configuration as JSON")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output JSON file")
    g.add_argument("--seed-override", type=int, default=None)
    return p


def _out_dir(arg: str | None) -> str:
    out = arg or os.environ.get(OUTPUT_DIR_ENV)
    if not out:
        raise ConfigError(f"--out not given and ${OUTPUT_DIR_ENV} unset", "--out")
    return out


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            out = _out_dir(args.out)
            manifest = run(args.config, out, seed_override=args.seed_override, band_filter=args.band_filter)
            print(f"wrote {len(manifest.files)} files to {out}")
            if args.summarize:
                summarize(out)
        elif args.command == "summarize":
            out = _out_dir(args.out)
            rows = summarize(out, figures=not args.no_figures)
            print((Path(out) / "summary.txt").read_text(encoding="utf-8"), end="")
            print(f"{len(rows)} links summarized")
        elif args.command == "validate-config":
            cfg = load_config_file(args.config)
            print(f"ok: seed={cfg.seed} duration={cfg.duration_s}s bands={cfg.bands_hz}"
                  f" winner_parity={cfg.winner_parity_mode}")
        elif args.command == "export-geometry":
            cfg = load_config_file(args.config)
            if args.seed_override is not None:
                cfg = cfg.replace(seed=args.seed_override)
            layers = build_geometry(cfg, Path(args.config).parent)
            Path(args.out).write_text(export_geometry(layers), encoding="utf-8")
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunError as exc:
        if isinstance(exc.cause, ConfigError):
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (HcmError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
