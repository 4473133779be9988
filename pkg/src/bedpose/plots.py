"""Line charts of per-epoch loss series, one PNG per series with every run overlaid."""

from __future__ import annotations

import logging
import os
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from bedpose.errors import ManifestError, PlotError  # noqa: E402
from bedpose.manifest import MANIFEST_FILE, RunManifest  # noqa: E402

logger = logging.getLogger(__name__)

LOSSES_ARTIFACT = "losses"
SERIES_FILE = "series.csv"


def _losses_csv(source: Path) -> tuple[str, Path]:
    """(label, CSV path) for a run directory, a manifest file or a bare CSV."""
    if source.suffix == ".csv":
        return source.stem if source.stem != "losses" else source.parent.name, source
    if source.is_dir() or source.name == MANIFEST_FILE:
        try:
            manifest = RunManifest.load(source)
            return manifest.out_dir.name, manifest.resolve(LOSSES_ARTIFACT)
        except ManifestError as exc:
            raise PlotError(f"no loss series for {source}: {exc}") from exc
    raise PlotError(f"cannot read loss series from {source}")


def load_series(source: str | os.PathLike[str]) -> tuple[str, pd.DataFrame]:
    label, path = _losses_csv(Path(source))
    if not path.is_file():
        raise PlotError(f"missing loss CSV: {path}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise PlotError(f"empty loss CSV: {path}") from None
    if frame.empty or "epoch" not in frame.columns:
        raise PlotError(f"loss CSV has no epoch rows: {path}")
    return label, frame


def plot_series(
    runs: Sequence[tuple[str, pd.DataFrame]], column: str, path: str | os.PathLike[str],
) -> Path:
    """One chart of ``column`` against epoch, a line per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label, frame in runs:
            if column not in frame.columns:
                raise PlotError(f"run {label!r} has no {column!r} series")
            ax.plot(frame["epoch"], frame[column], label=label)
        last = max(int(frame["epoch"].max()) for _, frame in runs)
        first = min(int(frame["epoch"].min()) for _, frame in runs)
        ax.set_xlim(first, max(last, first + 1))
        ax.set_xlabel("epoch")
        ax.set_ylabel(column)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path


def emit_plots(
    sources: Sequence[str | os.PathLike[str]],
    out_dir: str | os.PathLike[str],
    columns: Sequence[str] | None = None,
) -> list[Path]:
    """Render every series (default: all non-epoch columns of the first run).

    Also writes ``series.csv`` with every run's rows and a ``run`` column.
    """
    if not sources:
        raise PlotError("no runs to plot")
    runs = [load_series(s) for s in sources]
    columns = list(columns) if columns else [c for c in runs[0][1].columns if c != "epoch"]
    if not columns:
        raise PlotError("no series to plot")

    out = Path(out_dir)
    written: list[Path] = []
    for column in columns:
        for label, frame in runs:
            if column not in frame.columns:
                raise PlotError(f"run {label!r} has no {column!r} series")
        if all(frame[column].isna().all() for _, frame in runs):
            logger.warning("Series %s has no values in any run; skipped", column)
            continue
        written.append(plot_series(runs, column, out / f"{column}.png"))
    if not written:
        raise PlotError(f"no plottable values in {', '.join(columns)}")

    merged = pd.concat(
        [frame.assign(run=label) for label, frame in runs], ignore_index=True,
    )
    merged_path = out / SERIES_FILE
    merged.to_csv(merged_path, index=False)
    written.append(merged_path)
    logger.info("Plotted %d series from %d runs under %s", len(written) - 1, len(runs), out)
    return written
