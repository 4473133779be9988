"""JSON and hashing helpers for run artefacts (atomic writes)."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

from bedpose.errors import LoadError


def save_json(data: Any, path: str | os.PathLike[str]) -> Path:
    """Persist ``data`` atomically using a temp file and rename."""
    path = Path(path)
    os.makedirs(path.parent or ".", exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


def load_json(path: str | os.PathLike[str]) -> Any:
    """Read a JSON document, raising LoadError naming the path on failure."""
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise LoadError(f"missing file: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def sha256_file(path: str | os.PathLike[str], chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()
