"""Small file helpers: atomic writes, PNG round trips, digests."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def atomic_write_bytes(path, data: bytes):
    """Write via temp file + rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_png(path, pixels: np.ndarray):
    """Save a [0,1] float image (HxWx3) or mask (HxW) as an 8-bit PNG."""
    arr = np.asarray(pixels, dtype=np.float64)
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    import io

    buf = io.BytesIO()
    PILImage.fromarray(data, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path) -> np.ndarray:
    """Load a PNG back into float64 [0,1]; RGB images come back HxWx3."""
    with PILImage.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def dir_digest(root) -> str:
    """Digest of a directory tree: sha256 over sorted (relpath, file sha) pairs."""
    root = Path(root)
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file():
            entries.append((p.relative_to(root).as_posix(), sha256_file(p)))
    return sha256_json(entries)
