"""Markdown run reports rendered from a Jinja2 template."""

from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from bedpose.manifest import RunManifest

logger = logging.getLogger(__name__)

REPORT_FILE = "report.md"

# Templates live under bedpose/templates/
_TEMPLATES_DIR = Path(__file__).resolve().parent / "templates"
_jinja = Environment(
    loader=FileSystemLoader(str(_TEMPLATES_DIR)),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def render_report(
    manifest: RunManifest, table: pd.DataFrame | None = None, threshold: float = 0.5,
) -> str:
    context_table = None
    if table is not None:
        context_table = {
            "columns": [str(c) for c in table.columns],
            "rows": [(str(name), [float(v) for v in row]) for name, row in table.iterrows()],
        }
    template = _jinja.get_template("report.md.j2")
    return template.render(
        command=manifest.command,
        version=manifest.version,
        revision=manifest.revision,
        started=manifest.started,
        wall_clock=manifest.wall_clock_seconds,
        threshold=threshold,
        table=context_table,
        artifacts=manifest.artifacts,
        config=manifest.config,
    )


def write_report(
    manifest: RunManifest, table: pd.DataFrame | None = None, threshold: float = 0.5,
) -> Path | None:
    """Best-effort: a rendering failure is logged and the run goes on."""
    path = manifest.out_dir / REPORT_FILE
    try:
        path.write_text(render_report(manifest, table, threshold), encoding="utf-8")
    except Exception:
        logger.exception("Failed to render %s", path)
        return None
    manifest.add("report", path)
    return path
