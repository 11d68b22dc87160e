"""Command-line entry point: ``coughssl <stage> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import EXIT_CONFIG, EXIT_DATA, EXIT_OK, ConfigError, PipelineConfig
from .dataset_io import DataError
from .synth import SynthConfig, make_corpus

log = logging.getLogger("coughssl")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (paths.output_dir)")
    p.add_argument("--seed", type=int, help="ml.seed")
    p.add_argument("--budget", type=int, help="TPE trials per model kind (ml.budget)")
    p.add_argument("--scheme", choices=("universal", "expert", "majority"), help="ml.scheme")
    p.add_argument("--jobs", type=int, help="worker processes (run.jobs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coughssl", description="Cough corpus relabelling pipeline")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in pipeline.ORDER:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))
    _common(sub.add_parser("run", help="run every stage in order"))
    sp = sub.add_parser("synth", help="write a synthetic corpus (audio/, metadata.csv, config.toml)")
    sp.add_argument("directory", type=Path)
    sp.add_argument("--recordings", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.out is not None:
        out.append(f'paths.output_dir="{args.out.resolve().as_posix()}"')
    for flag, key in (("seed", "ml.seed"), ("budget", "ml.budget"), ("jobs", "run.jobs")):
        v = getattr(args, flag)
        if v is not None:
            out.append(f"{key}={v}")
    if args.scheme is not None:
        out.append(f'ml.scheme="{args.scheme}"')
    return out


def _synth(args) -> int:
    corpus = make_corpus(SynthConfig(n_recordings=args.recordings, seed=args.seed))
    corpus.write(args.directory)
    (args.directory / "config.toml").write_text(
        '[paths]\naudio_dir = "audio"\nmetadata = "metadata.csv"\noutput_dir = "out"\n'
    )
    print(f"wrote {args.recordings} recordings to {args.directory}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "synth":
        return _synth(args)
    try:
        cfg = PipelineConfig.load(args.config, _overrides(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stages = pipeline.ORDER if args.command == "run" else [args.command]
    try:
        pipeline.run_all(cfg, stages)
    except (DataError, pipeline.StageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
