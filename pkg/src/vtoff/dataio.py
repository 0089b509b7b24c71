"""Paired-dataset directory adapter.

Layout (one file per sample id, VITON-HD style):

    root/
      image/<id>.png     person photo
      cloth/<id>.png     canonical garment (ground truth)
      mask/<id>.png      binary garment mask on the person
      captions.jsonl     one JSON object per line: {"id", "description", ...}

Caption entries may additionally carry "levels" (prompt detail levels 0..3)
and "attributes"; loaders only require "description".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .conditioning import Image, Mask, Sample
from .ioutils import atomic_write_text, load_png, save_png


@dataclass
class DatasetRecord:
    sample_id: str
    sample: Sample
    levels: Optional[dict] = None
    attributes: Optional[dict] = None


def load_captions(root) -> dict:
    path = Path(root) / "captions.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"missing captions file: {path}")
    captions = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            captions[str(entry["id"])] = entry
    return captions


def load_dataset(root, mask_kind: str = "fit") -> List[DatasetRecord]:
    """Read every sample under ``root``; ids come from image/ filenames."""
    root = Path(root)
    image_dir = root / "image"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing image directory: {image_dir}")
    captions = load_captions(root)
    records = []
    for img_path in sorted(image_dir.glob("*.png")):
        sid = img_path.stem
        person = Image(load_png(img_path))
        garment = Image(load_png(root / "cloth" / f"{sid}.png"))
        mask_px = load_png(root / "mask" / f"{sid}.png")
        mask = Mask((mask_px > 0.5).astype(np.float64), kind=mask_kind)
        entry = captions.get(sid)
        if entry is None:
            raise KeyError(f"no caption for sample id {sid!r}")
        sample = Sample.build(person, garment, mask, str(entry["description"]))
        records.append(
            DatasetRecord(
                sample_id=sid,
                sample=sample,
                levels=entry.get("levels"),
                attributes=entry.get("attributes"),
            )
        )
    if not records:
        raise FileNotFoundError(f"no samples found under {root}")
    return records


def write_dataset(root, records) -> None:
    """Write records in the same layout this module reads.

    ``records`` is an iterable of dicts with keys: id, person, cloth, mask
    (arrays), description, and optional levels/attributes.
    """
    root = Path(root)
    lines = []
    for rec in records:
        sid = str(rec["id"])
        save_png(root / "image" / f"{sid}.png", rec["person"])
        save_png(root / "cloth" / f"{sid}.png", rec["cloth"])
        save_png(root / "mask" / f"{sid}.png", rec["mask"])
        entry = {"id": sid, "description": rec["description"]}
        if rec.get("levels") is not None:
            entry["levels"] = rec["levels"]
        if rec.get("attributes") is not None:
            entry["attributes"] = rec["attributes"]
        lines.append(json.dumps(entry, sort_keys=True))
    atomic_write_text(root / "captions.jsonl", "\n".join(lines) + "\n")
