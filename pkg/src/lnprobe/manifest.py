"""Experiment manifests: every report records how it was produced."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(command: str, config: dict, inputs: dict[str, str | Path],
                   deterministic: bool = True) -> dict:
    """Resolved config plus input digests. In deterministic mode (the
    default) the timestamp is omitted so replayed runs produce byte-identical
    reports."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {label: file_digest(path) for label, path in sorted(inputs.items())},
        "tool_version": __version__,
    }
    if not deterministic:
        manifest["created"] = datetime.now(timezone.utc).isoformat()
    return manifest


def write_report(payload: dict, manifest: dict, path: str | Path) -> None:
    report = dict(payload)
    report["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
