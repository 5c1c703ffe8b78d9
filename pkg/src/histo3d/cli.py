"""Command line entry points.

    histo3d run --config sample.json [--stages register,mesh] [--force]
    histo3d phantom --spec phantom.json --seed 42 --out ./phantom
    histo3d serve --bundle ./phantom --port 8080

HISTO3D_THREADS caps worker parallelism in the registration stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .phantom import PhantomSpec, generate_phantom
from .pipeline import STAGES, ConfigError, PipelineConfig, StageError, run_pipeline
from .server import serve


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = PipelineConfig.from_json(args.config)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    stages = args.stages.split(",") if args.stages else None
    try:
        run_pipeline(cfg, stages=stages, force=args.force)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"pipeline failed: {e}", file=sys.stderr)
        return 1
    return 0


def _cmd_phantom(args: argparse.Namespace) -> int:
    try:
        spec = PhantomSpec.from_json(args.spec) if args.spec else PhantomSpec()
        generate_phantom(spec, seed=args.seed, out_dir=args.out)
    except ValueError as e:
        print(f"invalid phantom spec: {e}", file=sys.stderr)
        return 2
    print(f"phantom written to {args.out}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    try:
        serve(args.bundle, port=args.port)
    except Exception as e:
        print(f"cannot serve bundle: {e}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histo3d",
        description="3D organ/tumor reconstruction from serial-section histology",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipeline stages on a sample")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument(
        "--stages", help=f"comma-separated subset of {','.join(STAGES)}"
    )
    run.add_argument("--force", action="store_true", help="rerun even if up to date")
    run.set_defaults(func=_cmd_run)

    phantom = sub.add_parser("phantom", help="generate a synthetic test stack")
    phantom.add_argument("--spec", type=Path, help="phantom spec JSON (defaults used if omitted)")
    phantom.add_argument("--seed", type=int, default=0)
    phantom.add_argument("--out", required=True, type=Path)
    phantom.set_defaults(func=_cmd_phantom)

    srv = sub.add_parser("serve", help="serve a scene bundle over HTTP")
    srv.add_argument("--bundle", required=True, type=Path)
    srv.add_argument("--port", type=int, default=8080)
    srv.set_defaults(func=_cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
