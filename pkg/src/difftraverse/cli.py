"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad arguments, missing config file),
2 data or validation error. Diagnostics go to stderr; results go to files.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline as pl

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--output-dir", help="override the config's output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="difftraverse",
                     description="Embedding-swap latent traversal on synthetic phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    _common(sub.add_parser("synth", help="render the train/val/test phantom datasets"))
    _common(sub.add_parser("train-denoiser", help="train the conditional noise predictor"))
    _common(sub.add_parser("train-classifier", help="train the content/attribute classifier"))

    g = sub.add_parser("generate", help="generate one image from a prompt")
    _common(g)
    g.add_argument("--prompt", required=True, help="e.g. 'phantom with device and grid'")
    g.add_argument("--seed", type=int, required=True, help="noise seed for x_T")
    g.add_argument("--out", required=True, help="output PGM path")

    t = sub.add_parser("traverse", help="build trajectory archives from swap plans")
    _common(t)
    t.add_argument("--style", action="append", help="restrict to these style attributes")
    t.add_argument("--style-prompt", help="single plan: style prompt (requires --out)")
    t.add_argument("--neutral-prompt", default="neutral phantom", help="single plan: neutral prompt")
    t.add_argument("--seed", type=int, default=0, help="single plan: noise seed")
    t.add_argument("--out", help="single plan: archive directory")

    i = sub.add_parser("interpolate", help="sample Bezier curves through trajectories")
    _common(i)
    i.add_argument("--archive", help="single trajectory archive (requires --out)")
    i.add_argument("--out", help="output archive directory")

    _common(sub.add_parser("evaluate", help="CFRT, cosine and perceptual reports"))
    _common(sub.add_parser("report", help="CSV tables and SVG plots from the evaluation"))
    _common(sub.add_parser("pipeline", help="run every stage in order"))
    return parser


STAGES = ["synth", "train-denoiser", "train-classifier", "traverse", "interpolate", "evaluate",
          "report"]


def _dispatch(command: str, args, cfg: pl.RunConfig) -> tuple[list, list]:
    if command == "synth":
        return [], pl.stage_synth(cfg)
    if command == "train-denoiser":
        return pl.stage_train_denoiser(cfg)
    if command == "train-classifier":
        return pl.stage_train_classifier(cfg)
    if command == "generate":
        return pl.stage_generate(cfg, args.prompt, args.seed, Path(args.out))
    if command == "traverse":
        if args.style_prompt is not None or args.out is not None:
            if args.style_prompt is None or args.out is None:
                raise UsageError("traverse: --style-prompt and --out must be given together")
            return pl.stage_traverse_one(cfg, args.neutral_prompt, args.style_prompt, args.seed,
                                         Path(args.out))
        return pl.stage_traverse(cfg, args.style)
    if command == "interpolate":
        if (args.archive is None) != (args.out is None):
            raise UsageError("interpolate: --archive and --out must be given together")
        if args.archive is not None:
            return pl.stage_interpolate_one(cfg, Path(args.archive), Path(args.out))
        return pl.stage_interpolate(cfg)
    if command == "evaluate":
        return pl.stage_evaluate(cfg)
    if command == "report":
        return pl.stage_report(cfg)
    raise UsageError(f"unknown command {command!r}")


def _run_stage(command: str, args, cfg: pl.RunConfig) -> None:
    started = time.perf_counter()
    inputs, outputs = _dispatch(command, args, cfg)
    pl.write_manifest(pl.Layout(cfg.output_dir), command, cfg, inputs, outputs, started)
    pl.log.info("%s: done in %.1f s", command, time.perf_counter() - started)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("difftraverse: a command is required", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.quiet)
    try:
        cfg = pl.load_config(args.config, args.output_dir)
        if args.command == "pipeline":
            for stage in STAGES:
                _run_stage(stage, argparse.Namespace(style=None, style_prompt=None, out=None,
                                                     archive=None), cfg)
        else:
            _run_stage(args.command, args, cfg)
    except UsageError as exc:
        print(f"difftraverse: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pl.ConfigNotFound as exc:
        print(f"difftraverse: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"difftraverse: {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _setup_logging(quiet: bool) -> None:
    logger = logging.getLogger("difftraverse")
    for old in list(logger.handlers):
        logger.removeHandler(old)
    h = logging.StreamHandler(sys.stderr)  # bound per run so redirected stderr is honoured
    h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.addHandler(h)
    logger.setLevel(logging.WARNING if quiet else logging.INFO)
    logger.propagate = False


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
