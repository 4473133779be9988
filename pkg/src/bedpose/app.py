"""Command-line entry point: argument parsing, logging setup and exit codes."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

from bedpose.config import ExperimentConfig
from bedpose.data.layout import ALIGNMENT_FILE, STATS_FILE
from bedpose.data.synthetic import generate_synthetic_dataset
from bedpose.errors import BedposeError, ConfigError
from bedpose.harness import evaluate, train_cgan, train_fusion, train_unimodal
from bedpose.manifest import start_run
from bedpose.models import Cover, Modality
from bedpose.pipeline import run_synthetic_visible_pipeline
from bedpose.plots import emit_plots

logger = logging.getLogger(__name__)


# ═══════════════════════════════════════════════════════════════════════════
# Commands
# ═══════════════════════════════════════════════════════════════════════════

def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if not path:
        raise ConfigError(f"{args.command} needs --config")
    return ExperimentConfig.from_file(
        path, seed=getattr(args, "seed", None), out=getattr(args, "out", None),
    )


def _split_names(raw: str | None, parse: Callable[[str], object], default: tuple) -> tuple:
    if not raw:
        return default
    return tuple(parse(part.strip()) for part in raw.split(",") if part.strip())


def cmd_gen_data(args: argparse.Namespace) -> None:
    seed = getattr(args, "seed", None)
    if seed is None:
        raise ConfigError("gen-data needs --seed")
    out = Path(getattr(args, "out", None) or "data/synthetic")
    modalities = _split_names(args.modalities, Modality.parse, tuple(Modality))
    covers = _split_names(args.covers, Cover.parse, tuple(Cover))
    manifest = start_run("gen-data", {
        "seed": seed, "out": str(out), "subjects": args.subjects, "poses": args.poses,
        "scale": args.scale, "modalities": [m.value for m in modalities],
        "covers": [c.value for c in covers],
    }, out)
    root = generate_synthetic_dataset(
        out, args.subjects, args.poses, seed,
        modalities=modalities, covers=covers, scale=args.scale,
    )
    manifest.add("alignment", root / ALIGNMENT_FILE)
    manifest.add("stats", root / STATS_FILE)
    manifest.write()


def cmd_plot(args: argparse.Namespace) -> None:
    out = Path(getattr(args, "out", None) or "plots")
    columns = [c.strip() for c in args.columns.split(",")] if args.columns else None
    manifest = start_run("plot", {"runs": [str(r) for r in args.runs], "out": str(out)}, out)
    for path in emit_plots(args.runs, out, columns):
        manifest.add(path.stem, path)
    manifest.write()


def _config_command(
    run: Callable[[ExperimentConfig], object],
) -> Callable[[argparse.Namespace], None]:
    def handler(args: argparse.Namespace) -> None:
        run(_load_config(args))
    return handler


# ═══════════════════════════════════════════════════════════════════════════
# Parser
# ═══════════════════════════════════════════════════════════════════════════

def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(
        prog="bedpose", description="Multimodal in-bed pose estimation experiments.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    gen.add_argument("--subjects", type=int, default=6)
    gen.add_argument("--poses", type=int, default=4)
    gen.add_argument("--scale", type=float, default=1.0)
    gen.add_argument("--modalities", default="", help="comma-separated, default all")
    gen.add_argument("--covers", default="", help="comma-separated, default all")
    gen.set_defaults(handler=cmd_gen_data)

    for name, run, text in (
        ("train-unimodal", train_unimodal, "train a single-modality backbone"),
        ("train-fusion", train_fusion, "train fused models"),
        ("train-cgan", train_cgan, "train the LWIR to visible translator"),
        ("evaluate", evaluate, "score a pose checkpoint"),
        ("reconstruct-eval", run_synthetic_visible_pipeline, "score on synthesised visible"),
    ):
        cmd = sub.add_parser(name, parents=[common], help=text)
        cmd.set_defaults(handler=_config_command(run))

    plot = sub.add_parser("plot", parents=[common], help="chart loss series of runs")
    plot.add_argument("runs", nargs="+", help="run directories, manifests or loss CSVs")
    plot.add_argument("--columns", default="", help="comma-separated series, default all")
    plot.set_defaults(handler=cmd_plot)
    return parser


# ═══════════════════════════════════════════════════════════════════════════
# Entry point
# ═══════════════════════════════════════════════════════════════════════════

def main(argv: Sequence[str] | None = None) -> None:
    """Parse arguments, run one command and exit with its status code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except BedposeError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        sys.exit(exc.exit_code)
