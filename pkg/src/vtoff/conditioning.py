"""Conditioning inputs for the dual-branch try-off model.

Everything the denoiser consumes is derived here from raw person/garment
pairs: garment masks (tight or dilated), the cloth-agnostic person image,
the isolated garment, the white-border background prior, the bounding-box
crop fed to the high-level image encoder, prompt templates, and the
training-time augmentations (applied to the conditioning side only, never
to the garment target).

All functions are pure: randomness always comes from an explicit seed, so
samples can be processed in parallel. Operations accept either the typed
wrappers (:class:`Image`, :class:`Mask`) or bare numpy arrays and return
the matching kind, which keeps tiny hand-computed oracles convenient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
from skimage import color as skcolor

from .resample import bilinear_resize, bilinear_sample

ArrayLike = Union["Image", "Mask", np.ndarray]


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image:
    """Dense H x W x 3 image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"image dims must be >= 8, got {px.shape[:2]}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary H x W mask; ``kind`` records whether it is tight or dilated."""

    pixels: np.ndarray
    kind: str = "fit"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"mask must be HxW, got {px.shape}")
        if not np.all((px == 0.0) | (px == 1.0)):
            raise ValueError("mask must be strictly binary")
        if self.kind not in ("fit", "dilated"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def is_empty(self) -> bool:
        return not bool(self.pixels.any())


@dataclass(frozen=True)
class Sample:
    """One person/garment record plus the derived conditioning images."""

    person: Image
    garment: Image
    mask: Mask
    description: str
    agnostic: Image
    isolated: Image

    @classmethod
    def build(cls, person: Image, garment: Image, mask: Mask, description: str) -> "Sample":
        if person.pixels.shape != garment.pixels.shape:
            raise ValueError("person and garment shapes differ")
        if mask.pixels.shape != person.pixels.shape[:2]:
            raise ValueError("mask shape does not match person")
        if mask.is_empty():
            raise ValueError("sample mask has no foreground")
        return cls(
            person=person,
            garment=garment,
            mask=mask,
            description=description,
            agnostic=make_agnostic(person, mask),
            isolated=make_isolated(person, mask),
        )


@dataclass(frozen=True)
class BackgroundPrior:
    """White-background prior for the inpainting-style creation branch.

    ``border_mask`` is 1 over the central region that the model must fill and
    0 on the preserved border band; ``masked_bg`` keeps the white border and
    zeroes the center.
    """

    white: Image
    border_mask: Mask
    masked_bg: Image


@dataclass(frozen=True)
class AugmentationFlags:
    """Conditioning-side augmentation switches.

    ``hflip_p``/``affine_p`` follow the usual p=0.5 defaults; color jitter is
    stage-gated by the curriculum. Affine shift/scale ranges are exposed here
    because no canonical values exist.
    """

    hflip_p: float = 0.5
    affine_p: float = 0.5
    color_jitter: bool = False
    rng_seed: int = 0
    max_shift: float = 0.1
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        for p in (self.hflip_p, self.affine_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class GarmentAttributes:
    """Structured garment description used to build prompts of varying detail."""

    cloth_type: str
    neckline: str = ""
    sleeve_length: str = ""
    waist: str = ""
    fit: str = ""
    hem: str = ""
    cloth_length: str = ""
    color: str = ""
    text: str = ""
    pattern: str = ""


# ---------------------------------------------------------------------------
# Array plumbing
# ---------------------------------------------------------------------------

def _pixels(x: ArrayLike) -> np.ndarray:
    if isinstance(x, (Image, Mask)):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


def _like_image(template: ArrayLike, pixels: np.ndarray):
    return Image(pixels) if isinstance(template, Image) else pixels


def _check_same_shape(a: np.ndarray, m: np.ndarray):
    if a.shape[: m.ndim] != m.shape:
        raise ValueError(f"shape mismatch: image {a.shape} vs mask {m.shape}")


def _broadcast_mask(img: np.ndarray, msk: np.ndarray) -> np.ndarray:
    return msk[..., None] if img.ndim == 3 else msk


# ---------------------------------------------------------------------------
# Core image/mask operations
# ---------------------------------------------------------------------------

def make_agnostic(person: ArrayLike, mask: ArrayLike):
    """Person image with the garment region zeroed: person * (1 - mask)."""
    p, m = _pixels(person), _pixels(mask)
    _check_same_shape(p, m)
    return _like_image(person, p * (1.0 - _broadcast_mask(p, m)))


def make_isolated(person: ArrayLike, mask: ArrayLike):
    """Garment pixels only: person * mask. Complement of :func:`make_agnostic`."""
    p, m = _pixels(person), _pixels(mask)
    _check_same_shape(p, m)
    return _like_image(person, p * _broadcast_mask(p, m))


def _disk_offsets(radius: int):
    r = int(radius)
    return [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= r * r
    ]


def dilate_mask(fit: ArrayLike, radius: int):
    """Morphological dilation with a disk structuring element.

    Implemented as a shift-OR over the disk's offsets on a zero-padded copy,
    which matches dilation clipped to the image domain.
    """
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    m = _pixels(fit)
    r = int(radius)
    if r == 0:
        out = m.copy()
    else:
        h, w = m.shape
        padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
        padded[r : r + h, r : r + w] = m > 0
        acc = np.zeros((h, w), dtype=bool)
        for dy, dx in _disk_offsets(r):
            acc |= padded[r + dy : r + dy + h, r + dx : r + dx + w]
        out = acc.astype(np.float64)
    if isinstance(fit, Mask):
        return Mask(out, kind="dilated" if r > 0 else fit.kind)
    return out


def extend_mask_up(fit: ArrayLike, rows: int):
    """Union the mask with copies shifted upward by 1..rows pixels."""
    m = _pixels(fit) > 0
    out = m.copy()
    h = m.shape[0]
    for k in range(1, min(int(rows), h - 1) + 1):
        out[: h - k] |= m[k:]
    out = out.astype(np.float64)
    return Mask(out, kind="dilated") if isinstance(fit, Mask) else out


def make_conditioning_mask(fit: Mask, kind: str, radius: int = 3) -> Mask:
    """Mask of the requested kind from a tight garment segmentation.

    The dilated kind is the disk dilation plus an upward band of 15% of the
    image height, a stand-in for the pose-based neck/arm coverage that real
    pipelines get from human parsing.
    """
    if kind == "fit":
        return Mask(fit.pixels.copy(), kind="fit")
    if kind != "dilated":
        raise ValueError(f"unknown mask kind {kind!r}")
    band = math.ceil(0.15 * fit.height)
    grown = dilate_mask(fit, radius)
    lifted = extend_mask_up(fit, band)
    return Mask(np.maximum(grown.pixels, lifted.pixels), kind="dilated")


def make_background_prior(height: int, width: int) -> BackgroundPrior:
    """White image, central-region mask, and white-border background.

    The preserved border band is ceil(0.10 * dim) pixels on each side.
    """
    if height < 10 or width < 10:
        raise ValueError("background prior needs dims >= 10")
    bh = math.ceil(0.10 * height)
    bw = math.ceil(0.10 * width)
    center = np.zeros((height, width), dtype=np.float64)
    center[bh : height - bh, bw : width - bw] = 1.0
    white = np.ones((height, width, 3), dtype=np.float64)
    masked_bg = white * (1.0 - center[..., None])
    return BackgroundPrior(white=Image(white), border_mask=Mask(center), masked_bg=Image(masked_bg))


def mask_bbox(mask: ArrayLike) -> tuple:
    """Half-open (r0, r1, c0, c1) bounding box of the mask foreground."""
    m = _pixels(mask) > 0
    if not m.any():
        raise ValueError("mask has no foreground")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def crop_to_encoder(person: ArrayLike, mask: ArrayLike, out_size: int):
    """Tight mask-bounding-box crop, resized to out_size x out_size."""
    p = _pixels(person)
    r0, r1, c0, c1 = mask_bbox(mask)
    crop = p[r0:r1, c0:c1]
    out = bilinear_resize(crop, out_size, out_size)
    return _like_image(person, np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

_PROMPT_TEMPLATES = {
    "creation": "a frontal view of {}",
    "condition": "model is wearing {}",
}

_LEVEL_FIELDS = {
    0: ("cloth_type",),
    1: ("cloth_type", "neckline", "sleeve_length"),
    2: ("cloth_type", "waist", "fit", "hem", "neckline", "sleeve_length", "cloth_length"),
    3: (
        "cloth_type", "waist", "fit", "hem", "neckline", "sleeve_length",
        "cloth_length", "color", "text", "pattern",
    ),
}
_OPTIONAL_FIELDS = {"text"}


def build_prompt(description: str, branch: str) -> str:
    if branch not in _PROMPT_TEMPLATES:
        raise ValueError(f"unknown branch {branch!r}")
    return _PROMPT_TEMPLATES[branch].format(description)


def prompt_at_level(attributes, level: int) -> str:
    """Comma-joined attribute subset for detail levels 0..3.

    Level 1 (type, neckline, sleeve length) is the default description;
    level 3 adds color, any printed text, and the texture/pattern.
    """
    if level not in _LEVEL_FIELDS:
        raise ValueError(f"prompt level must be 0..3, got {level}")
    if isinstance(attributes, Mapping):
        attributes = GarmentAttributes(**attributes)
    parts = []
    for name in _LEVEL_FIELDS[level]:
        value = getattr(attributes, name)
        if not value:
            if name in _OPTIONAL_FIELDS:
                continue
            raise ValueError(f"attribute {name!r} required for level {level}")
        parts.append(value)
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def hsv_color_shift(pixels: np.ndarray, dh: float = 0.0, ds: float = 0.0, dv: float = 0.0) -> np.ndarray:
    """HSV shift: hue rotated by dh (wrapping), saturation/value scaled by 1+ds / 1+dv."""
    hsv = skcolor.rgb2hsv(pixels)
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + ds), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + dv), 0.0, 1.0)
    return np.clip(skcolor.hsv2rgb(hsv), 0.0, 1.0)


def _color_jitter(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = pixels
    brightness, contrast, saturation = 1.0 + rng.uniform(-0.3, 0.3, size=3)
    hue = rng.uniform(-0.05, 0.05)
    out = np.clip(out * brightness, 0.0, 1.0)
    mean = out.mean()
    out = np.clip(mean + (out - mean) * contrast, 0.0, 1.0)
    gray = out.mean(axis=2, keepdims=True)
    out = np.clip(gray + (out - gray) * saturation, 0.0, 1.0)
    return hsv_color_shift(out, dh=hue)


def _affine_resample(person: np.ndarray, mask: np.ndarray, shift, scale):
    h, w = mask.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dst_y, dst_x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_y = (dst_y - cy - shift[0]) / scale + cy
    src_x = (dst_x - cx - shift[1]) / scale + cx
    person_t = np.clip(bilinear_sample(person, src_y, src_x), 0.0, 1.0)
    iy = np.clip(np.rint(src_y), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(src_x), 0, w - 1).astype(np.intp)
    mask_t = mask[iy, ix]
    return person_t, mask_t


def augment(sample: Sample, flags: AugmentationFlags) -> Sample:
    """Jointly transform the conditioning images; the garment target is untouched.

    Deterministic for a fixed ``flags.rng_seed``. A degenerate affine draw that
    would empty the mask is clamped back to the identity.
    """
    rng = np.random.default_rng(flags.rng_seed)
    person = sample.person.pixels.copy()
    mask = sample.mask.pixels.copy()

    if rng.random() < flags.hflip_p:
        person = person[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    if rng.random() < flags.affine_p:
        h, w = mask.shape
        shift = (rng.uniform(-flags.max_shift, flags.max_shift) * h,
                 rng.uniform(-flags.max_shift, flags.max_shift) * w)
        scale = rng.uniform(*flags.scale_range)
        person_t, mask_t = _affine_resample(person, mask, shift, scale)
        if mask_t.any():
            person, mask = person_t, mask_t
    if flags.color_jitter:
        person = _color_jitter(person, rng)

    return Sample.build(
        person=Image(person),
        garment=sample.garment,
        mask=Mask(mask, kind=sample.mask.kind),
        description=sample.description,
    )
