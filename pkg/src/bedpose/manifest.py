"""Run manifest: resolved config, produced artefacts with hashes, revision and timing."""

from __future__ import annotations

import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from bedpose import __version__
from bedpose.errors import LoadError, ManifestError
from bedpose.storage import load_json, save_json, sha256_file

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def source_revision(cwd: str | os.PathLike[str] | None = None) -> str:
    """Current git commit, or ``"unknown"`` outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=cwd or Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=10, check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return datetime.now(tz=timezone.utc).isoformat(timespec="seconds")


@dataclass(slots=True)
class RunManifest:
    """Everything needed to trace a run's outputs back to its inputs."""

    command: str
    config: dict[str, Any]
    out_dir: Path
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    revision: str = "unknown"
    version: str = "0.0.0-dev"
    started: str = field(default_factory=_now)
    finished: str = ""
    wall_clock_seconds: float = 0.0
    _t0: float = field(default_factory=time.monotonic, repr=False)

    @property
    def path(self) -> Path:
        return self.out_dir / MANIFEST_FILE

    def add(self, name: str, path: str | os.PathLike[str]) -> Path:
        """Record an artefact; it must already exist."""
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"artefact {name!r} does not exist: {path}")
        self.artifacts[name] = {"path": self._relative(path), "sha256": sha256_file(path)}
        return path

    def _relative(self, path: Path) -> str:
        try:
            return str(path.resolve().relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(path.resolve())

    def resolve(self, name: str) -> Path:
        try:
            raw = self.artifacts[name]["path"]
        except KeyError:
            raise ManifestError(f"manifest has no artefact {name!r}") from None
        path = Path(raw)
        return path if path.is_absolute() else self.out_dir / path

    def to_json(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "artifacts": self.artifacts,
            "revision": self.revision,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def write(self) -> Path:
        """Stamp the finish time and persist atomically."""
        self.finished = _now()
        self.wall_clock_seconds = round(time.monotonic() - self._t0, 3)
        for name in self.artifacts:
            if not self.resolve(name).is_file():
                raise ManifestError(f"artefact {name!r} vanished before the manifest was written")
        save_json(self.to_json(), self.path)
        logger.info("Wrote %s (%d artefacts)", self.path, len(self.artifacts))
        return self.path

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> RunManifest:
        """Read a manifest file or a run directory containing one."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        try:
            data = load_json(path)
        except LoadError as exc:
            raise ManifestError(str(exc)) from exc
        try:
            return cls(
                command=data["command"],
                config=dict(data["config"]),
                out_dir=path.parent,
                artifacts={k: dict(v) for k, v in data["artifacts"].items()},
                revision=data.get("revision", "unknown"),
                version=data.get("version", "0.0.0-dev"),
                started=data.get("started", ""),
                finished=data.get("finished", ""),
                wall_clock_seconds=float(data.get("wall_clock_seconds", 0.0)),
            )
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest {path}: {exc}") from exc

    def verify(self) -> None:
        """Every artefact exists and still hashes to the recorded digest."""
        for name, entry in self.artifacts.items():
            path = self.resolve(name)
            if not path.is_file():
                raise ManifestError(f"artefact {name!r} missing: {path}")
            if sha256_file(path) != entry.get("sha256"):
                raise ManifestError(f"artefact {name!r} changed since the run: {path}")


def start_run(command: str, config: dict[str, Any], out_dir: str | os.PathLike[str]) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(
        command=command, config=config, out_dir=out,
        revision=source_revision(), version=__version__,
    )
