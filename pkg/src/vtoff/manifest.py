"""Run manifests: recomputable digests tying artifacts to config + seeds."""

from __future__ import annotations

import json
from pathlib import Path

from .ioutils import atomic_write_json, dir_digest, sha256_file

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format") != "vtoff-manifest":
        raise ValueError(f"not a run manifest: {path}")
    return data


def update_manifest(path, kind: str, payload: dict) -> dict:
    """Append one entry (created if missing); entries are ordered, no timestamps."""
    path = Path(path)
    if path.is_file():
        data = read_manifest(path)
    else:
        data = {"format": "vtoff-manifest", "version": 1, "tool_version": TOOL_VERSION, "entries": []}
    data["entries"].append({"kind": kind, **payload})
    atomic_write_json(path, data)
    return data


def dataset_entry(root) -> dict:
    return {"path": str(root), "digest": dir_digest(root)}


def file_entry(path) -> dict:
    return {"path": str(path), "digest": sha256_file(path)}
