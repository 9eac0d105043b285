"""Command-line entry point ``qcmap``.

Exit codes: 0 on convergence (or a finished utility mode), 2 when the
divergence guard fires, 1 on input errors and 3 when a run stops at
``outer_max`` without meeting the tolerances.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from qcmap import io
from qcmap.apps import EXAMPLES, AppError, ExampleSpec, generate_example, run_mode
from qcmap.grid import GridError
from qcmap.image import ImageError

logger = logging.getLogger("qcmap")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_NOT_CONVERGED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qcmap", description="Folding-free quasi-conformal "
                                 "deformations on regular simplicial grids.")
    ap.add_argument("--log-level", default="INFO",
                    choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)
    for mode in io.MODES:
        p = sub.add_parser(mode, help=f"run the '{mode}' mode")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--continuation", action="store_true",
                       help="warm-start from coarser grids")
        p.add_argument("--log-level", default=argparse.SUPPRESS,
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g = sub.add_parser("generate", help="write a synthetic example")
    g.add_argument("example", choices=EXAMPLES)
    g.add_argument("--N", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--param", action="append", default=[], metavar="KEY=JSON",
                   help="generator parameter, e.g. prior=3 or angle_deg=30")
    g.add_argument("--log-level", default=argparse.SUPPRESS,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return ap


def _params(items) -> dict:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            spec = ExampleSpec(args.example, args.N, _params(args.param))
            out = generate_example(spec, args.out)
            print(out)
            return EXIT_OK
        cfg = io.read_config(args.config)
        if cfg.mode != args.command:
            raise io.ConfigError(f"config is for mode '{cfg.mode}', not '{args.command}'")
        if args.continuation:
            cfg.continuation = True
        result = run_mode(cfg, args.out)
    except (io.ConfigError, io.FormatError, AppError, GridError, ImageError, ValueError,
            FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    status = result.summary.get("status")
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    if status == "diverged":
        return EXIT_DIVERGED
    if status != "converged":
        logger.warning("stopped at %s without meeting the tolerances", status)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
