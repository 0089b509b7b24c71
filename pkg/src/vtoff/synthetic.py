"""Procedural paired person/garment generator for desk-scale experiments.

Each sample renders a canonical garment (frontal, white background) from a
small family/texture grammar, then a "worn" person image: the garment is
TPS-deformed by a configurable amplitude, pasted at a known offset over a
body silhouette, and partially occluded by a forearm band. The mask is
exactly the visible garment support, and captions are templated from the
generator's own attributes, so every prompt detail level is truthful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .conditioning import GarmentAttributes, prompt_at_level
from .dataio import write_dataset
from .probe import fit_tps
from .resample import bilinear_sample

GARMENT_FAMILIES = ("tee", "hoodie", "tank")
TEXTURE_FAMILIES = ("solid", "stripes", "blocks", "logo_patch")

_BG_PERSON = 0.92
_SKIN = np.array([0.85, 0.70, 0.58])
_PANTS = np.array([0.35, 0.35, 0.42])

_PALETTE = (
    ("red", (0.80, 0.15, 0.15)),
    ("blue", (0.15, 0.25, 0.75)),
    ("green", (0.15, 0.60, 0.25)),
    ("yellow", (0.85, 0.78, 0.15)),
    ("purple", (0.55, 0.20, 0.65)),
    ("teal", (0.10, 0.60, 0.60)),
    ("orange", (0.85, 0.55, 0.10)),
    ("navy", (0.10, 0.15, 0.40)),
)

_FAMILY_ATTRS = {
    "tee": dict(cloth_type="t-shirt", neckline="crew neck", sleeve_length="short sleeve"),
    "hoodie": dict(cloth_type="hoodie", neckline="hooded collar", sleeve_length="long sleeve"),
    "tank": dict(cloth_type="tank top", neckline="scoop neck", sleeve_length="sleeveless"),
}
_PATTERN_NAMES = {"solid": "solid", "stripes": "striped", "blocks": "color block", "logo_patch": "logo patch"}


@dataclass(frozen=True)
class SyntheticSpec:
    count: int
    height: int = 64
    width: int = 48
    garment_family: Optional[str] = None   # None = draw per sample
    texture_family: Optional[str] = None
    deform_amplitude: float = 1.5
    seed: int = 0
    codec_factor: int = 4

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.height % self.codec_factor or self.width % self.codec_factor:
            raise ValueError("dims must be divisible by the codec factor")
        if self.garment_family is not None and self.garment_family not in GARMENT_FAMILIES:
            raise ValueError(f"unknown garment family {self.garment_family!r}")
        if self.texture_family is not None and self.texture_family not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.texture_family!r}")
        if self.deform_amplitude < 0:
            raise ValueError("deform amplitude must be >= 0")


def _paint_texture(canvas, alpha, base, texture, rng):
    base = np.asarray(base)
    canvas[alpha] = base
    ys, xs = np.nonzero(alpha)
    if texture == "stripes":
        dark = base * 0.45
        stripe = (ys // 4) % 2 == 0
        canvas[ys[stripe], xs[stripe]] = dark
    elif texture == "blocks":
        alt = np.clip(1.0 - (1.0 - base) * 0.45, 0.0, 0.9)
        block = ((ys // 6) + (xs // 6)) % 2 == 0
        canvas[ys[block], xs[block]] = alt
    elif texture == "logo_patch":
        logo = np.clip(1.0 - base, 0.05, 0.85)
        r0, c0 = int(ys.min() + 0.25 * (ys.max() - ys.min())), int(xs.mean()) - 3
        patch = np.zeros_like(alpha)
        patch[r0 : r0 + 6, c0 : c0 + 7] = True
        patch &= alpha
        canvas[patch] = logo


def _garment_geometry(h, w, family, rng):
    """Boolean support of the garment silhouette."""
    alpha = np.zeros((h, w), dtype=bool)
    jit = lambda: int(rng.integers(-1, 2))
    top = int(0.28 * h) + jit()
    bottom = int(0.80 * h) + jit()
    if family == "tank":
        left, right = int(0.30 * w) + jit(), int(0.70 * w) + jit()
    else:
        left, right = int(0.25 * w) + jit(), int(0.75 * w) + jit()
    alpha[top:bottom, left:right] = True

    if family == "tee":
        s_bot = int(0.48 * h)
        alpha[top:s_bot, int(0.12 * w) : left] = True
        alpha[top:s_bot, right : int(0.88 * w)] = True
    elif family == "hoodie":
        s_bot = int(0.76 * h)
        alpha[top:s_bot, int(0.12 * w) : left] = True
        alpha[top:s_bot, right : int(0.88 * w)] = True
        hood_top = int(0.20 * h)
        alpha[hood_top:top, int(0.35 * w) : int(0.65 * w)] = True

    # neckline notch
    notch_depth = {"tee": int(0.04 * h), "tank": int(0.07 * h), "hoodie": int(0.02 * h)}[family]
    cx0, cx1 = int(0.42 * w), int(0.58 * w)
    alpha[top : top + notch_depth, cx0:cx1] = False
    return alpha


def _render_garment(h, w, family, texture, base_color, rng):
    alpha = _garment_geometry(h, w, family, rng)
    cloth = np.ones((h, w, 3), dtype=np.float64)
    _paint_texture(cloth, alpha, base_color, texture, rng)
    return cloth, alpha


def _tps_deform(cloth, alpha, amplitude, rng):
    """Backward-map TPS deformation of the garment canvas; identity at amplitude 0."""
    if amplitude == 0.0:
        return cloth.copy(), alpha.copy()
    h, w = alpha.shape
    fg = np.argwhere(alpha)
    r0, c0 = fg.min(axis=0)
    r1, c1 = fg.max(axis=0)
    src = np.array([[r, c] for r in np.linspace(r0, r1, 3) for c in np.linspace(c0, c1, 3)])
    dst = src + rng.uniform(-amplitude, amplitude, size=src.shape)
    tps = fit_tps(dst, src)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = tps.transform(np.column_stack([gy.ravel(), gx.ravel()]))
    sy = coords[:, 0].reshape(h, w)
    sx = coords[:, 1].reshape(h, w)
    warped = np.clip(bilinear_sample(cloth, sy, sx), 0.0, 1.0)
    iy = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
    return warped, alpha[iy, ix]


def _render_person(h, w, worn, worn_alpha, placement, rng):
    dy, dx = placement
    person = np.full((h, w, 3), _BG_PERSON, dtype=np.float64)

    # head
    cy, cx = 0.10 * h, 0.5 * w
    ry, rx = 0.075 * h, 0.11 * w
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    head = ((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2 <= 1.0
    person[head] = _SKIN
    # neck, arms, legs
    person[int(0.15 * h) : int(0.30 * h), int(0.44 * w) : int(0.56 * w)] = _SKIN
    person[int(0.30 * h) : int(0.78 * h), int(0.10 * w) : int(0.16 * w)] = _SKIN
    person[int(0.30 * h) : int(0.78 * h), int(0.84 * w) : int(0.90 * w)] = _SKIN
    person[int(0.80 * h) :, int(0.30 * w) : int(0.70 * w)] = _PANTS

    # paste the (deformed) garment at the known offset
    pasted = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(worn_alpha)
    py, px = ys + dy, xs + dx
    ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
    person[py[ok], px[ok]] = worn[ys[ok], xs[ok]]
    pasted[py[ok], px[ok]] = True

    # forearm occluder across the torso
    occ = np.zeros((h, w), dtype=bool)
    occ[int(0.56 * h) : int(0.62 * h), int(0.14 * w) : int(0.56 * w)] = True
    person[occ] = _SKIN

    visible = pasted & ~occ
    return person, visible


def render_synthetic_sample(spec: SyntheticSpec, index: int) -> dict:
    """Deterministic single-sample render; returns images, mask, attrs, captions."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))
    h, w = spec.height, spec.width
    family = spec.garment_family or str(rng.choice(GARMENT_FAMILIES))
    texture = spec.texture_family or str(rng.choice(TEXTURE_FAMILIES))
    color_name, color = _PALETTE[int(rng.integers(len(_PALETTE)))]

    cloth, alpha = _render_garment(h, w, family, texture, color, rng)
    worn, worn_alpha = _tps_deform(cloth, alpha, spec.deform_amplitude, rng)
    placement = (int(round(0.03 * h)), 0)
    person, mask = _render_person(h, w, worn, worn_alpha, placement, rng)

    attrs = GarmentAttributes(
        waist="regular waist",
        fit=str(rng.choice(["slim fit", "regular fit", "relaxed fit"])),
        hem="straight hem",
        cloth_length=str(rng.choice(["waist length", "hip length"])),
        color=color_name,
        text="",
        pattern=_PATTERN_NAMES[texture],
        **_FAMILY_ATTRS[family],
    )
    levels = {str(k): prompt_at_level(attrs, k) for k in range(4)}
    return {
        "id": f"{index:05d}",
        "person": person,
        "cloth": cloth,
        "mask": mask.astype(np.float64),
        "description": levels["1"],
        "levels": levels,
        "attributes": attrs.__dict__.copy(),
        "placement": placement,
        "canonical_alpha": alpha,
        "family": family,
        "texture": texture,
    }


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list:
    """Render ``spec.count`` samples and write the paired-directory layout."""
    records = [render_synthetic_sample(spec, i) for i in range(spec.count)]
    write_dataset(out_dir, records)
    return [r["id"] for r in records]
