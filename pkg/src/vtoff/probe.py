"""Metric-sensitivity probe: controlled distortions of ground-truth garments.

Four disentangled distortion families (background brightness, garment color,
garment shape, garment texture) are applied to canonical garment images and
the metric suite is evaluated distorted-vs-original, one table row per
distortion. Every distortion is deterministic given (params, seed).

Shape edits re-composite the transformed garment over the original
background; pixels the garment vacates are filled with the mean color of the
image's own background (white if the mask covers everything). Mild/drastic
texture ranges: blur kernels 3-7 vs 9-21, copy-paste boxes 1-2 small vs 4-8
large.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .conditioning import Image, Mask, hsv_color_shift
from .metrics import MetricReport, evaluate
from .resample import bilinear_sample

DISTORTION_KINDS = ("background_brightness", "cloth_color", "cloth_shape", "cloth_texture")


def _pix(x) -> np.ndarray:
    if isinstance(x, (Image, Mask)):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


def _seed_of(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


# ---------------------------------------------------------------------------
# Thin-plate spline
# ---------------------------------------------------------------------------

def _tps_kernel(r: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, with U(0) = 0
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


@dataclass(frozen=True)
class TPSWarp:
    """Solved thin-plate spline mapping control_src -> control_dst.

    Points are (row, col) pixel coordinates; ``weights`` are the radial
    coefficients and ``affine`` the [const, row, col] part, one column per
    output coordinate.
    """

    control_src: np.ndarray
    control_dst: np.ndarray
    weights: np.ndarray
    affine: np.ndarray

    def transform(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts[:, None, :] - self.control_src[None, :, :], axis=2)
        u = _tps_kernel(r)
        p = np.column_stack([np.ones(len(pts)), pts])
        out = u @ self.weights + p @ self.affine
        return out[0] if squeeze else out

    def bending_energy(self) -> float:
        r = np.linalg.norm(
            self.control_src[:, None, :] - self.control_src[None, :, :], axis=2
        )
        k = _tps_kernel(r)
        return float(np.trace(self.weights.T @ k @ self.weights))


def fit_tps(src, dst, regularization: float = 0.0) -> TPSWarp:
    """Solve the (n+3)x(n+3) TPS system with affine side conditions.

    At regularization 0 the warp interpolates the control points exactly.
    Collinear control points make the system singular and are rejected.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ValueError("control points must be matching n x 2 arrays")
    n = src.shape[0]
    if n < 3:
        raise ValueError("need at least 3 control points")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    p = np.column_stack([np.ones(n), src])
    if np.linalg.matrix_rank(p) < 3:
        raise ValueError("control points are collinear")
    r = np.linalg.norm(src[:, None, :] - src[None, :, :], axis=2)
    k = _tps_kernel(r) + regularization * np.eye(n)
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = k
    system[:n, n:] = p
    system[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"singular TPS system: {e}") from e
    return TPSWarp(control_src=src.copy(), control_dst=dst.copy(),
                   weights=sol[:n], affine=sol[n:])


def _background_fill(garment: np.ndarray, mask: np.ndarray) -> np.ndarray:
    bg = mask == 0
    if bg.any():
        return garment[bg].mean(axis=0)
    return np.ones(3)


def _recomposite(garment, mask, warped, new_mask):
    fill = _background_fill(garment, mask)
    out = garment.copy()
    out[mask > 0] = fill
    sel = new_mask > 0
    out[sel] = warped[sel]
    return np.clip(out, 0.0, 1.0), new_mask.astype(np.float64)


def _warp_backward(garment, mask, src_rows, src_cols):
    warped = np.clip(bilinear_sample(garment, src_rows, src_cols), 0.0, 1.0)
    h, w = mask.shape
    iy = np.clip(np.rint(src_rows), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(src_cols), 0, w - 1).astype(np.intp)
    return warped, mask[iy, ix]


# ---------------------------------------------------------------------------
# Distortion operations
# ---------------------------------------------------------------------------

def bg_brightness(garment, garment_mask, factor: float):
    """Scale the background by ``factor`` (clamped); garment pixels untouched."""
    g, m = _pix(garment), _pix(garment_mask)
    out = np.where(m[..., None] > 0, g, np.clip(g * factor, 0.0, 1.0))
    return Image(out) if isinstance(garment, Image) else out


def cloth_color(garment, garment_mask, dh: float = 0.0, ds: float = 0.0, dv: float = 0.0):
    """HSV shift inside the mask only; background bit-identical."""
    g, m = _pix(garment), _pix(garment_mask)
    shifted = hsv_color_shift(g, dh=dh, ds=ds, dv=dv)
    out = np.where(m[..., None] > 0, shifted, g)
    return Image(out) if isinstance(garment, Image) else out


def _rot_scale(garment, mask, angle_deg: float, scale: float):
    h, w = mask.shape
    fg = np.argwhere(mask > 0)
    cy, cx = fg.mean(axis=0) if len(fg) else ((h - 1) / 2.0, (w - 1) / 2.0)
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # backward map: rotate by -theta and divide by scale
    src_r = (cos_t * dy + sin_t * dx) / scale + cy
    src_c = (-sin_t * dy + cos_t * dx) / scale + cx
    return _warp_backward(garment, mask, src_r, src_c)


def _shorten_hem(garment, mask, rows: int):
    fg_rows = np.flatnonzero(mask.any(axis=1))
    if len(fg_rows) == 0:
        return garment.copy(), mask.copy()
    cut = fg_rows[-1] - max(int(rows), 0)
    new_mask = mask.copy()
    new_mask[cut + 1 :] = 0.0
    fill = _background_fill(garment, mask)
    out = garment.copy()
    removed = (mask > 0) & (new_mask == 0)
    out[removed] = fill
    return out, new_mask


def _tps_shape(garment, mask, amplitude: float, rng: np.random.Generator):
    h, w = mask.shape
    fg = np.argwhere(mask > 0)
    if len(fg) == 0:
        return garment.copy(), mask.copy()
    r0, c0 = fg.min(axis=0)
    r1, c1 = fg.max(axis=0)
    grid_r = np.linspace(r0, r1, 3)
    grid_c = np.linspace(c0, c1, 3)
    src = np.array([[r, c] for r in grid_r for c in grid_c])
    dst = src + rng.uniform(-amplitude, amplitude, size=src.shape)
    # backward map: where does each output pixel sample from
    tps = fit_tps(dst, src)
    dy, dx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = tps.transform(np.column_stack([dy.ravel(), dx.ravel()]))
    src_r = coords[:, 0].reshape(h, w)
    src_c = coords[:, 1].reshape(h, w)
    return _warp_backward(garment, mask, src_r, src_c)


def cloth_shape(garment, garment_mask, op: str, params: Optional[dict] = None, seed: int = 0):
    """Shape distortion: rot_scale | shorten_hem | tps, re-embedded into the background."""
    g, m = _pix(garment), _pix(garment_mask)
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if op == "rot_scale":
        warped, new_mask = _rot_scale(g, m, params.get("angle_deg", 0.0), params.get("scale", 1.0))
    elif op == "shorten_hem":
        out, new_mask = _shorten_hem(g, m, params.get("rows", 0))
        img = Image(out) if isinstance(garment, Image) else out
        msk = Mask(new_mask) if isinstance(garment_mask, Mask) else new_mask
        return img, msk
    elif op == "tps":
        warped, new_mask = _tps_shape(g, m, params.get("amplitude", 0.0), rng)
    else:
        raise ValueError(f"unknown shape op {op!r}")
    out, new_mask = _recomposite(g, m, warped, new_mask)
    img = Image(out) if isinstance(garment, Image) else out
    msk = Mask(new_mask) if isinstance(garment_mask, Mask) else new_mask
    return img, msk


_BLUR_RANGE = {"mild": (3, 7), "drastic": (9, 21)}
_BOX_COUNT = {"mild": (1, 2), "drastic": (4, 8)}
_BOX_FRAC = {"mild": (0.10, 0.20), "drastic": (0.20, 0.35)}


def _gaussian_kernel_1d(size: int) -> np.ndarray:
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def masked_blur(garment: np.ndarray, mask: np.ndarray, kernel_size: int) -> np.ndarray:
    """Gaussian blur confined to the mask with boundary renormalization."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    if kernel_size == 1:
        return garment.copy()
    g1 = _gaussian_kernel_1d(kernel_size)
    kern = np.outer(g1, g1)
    m = (mask > 0).astype(np.float64)
    weight = ndimage.convolve(m, kern, mode="constant", cval=0.0)
    out = garment.copy()
    for c in range(garment.shape[2]):
        num = ndimage.convolve(garment[..., c] * m, kern, mode="constant", cval=0.0)
        blurred = np.divide(num, weight, out=np.zeros_like(num), where=weight > 0)
        out[..., c] = np.where(m > 0, blurred, garment[..., c])
    return np.clip(out, 0.0, 1.0)


def _copy_paste(garment, mask, level: str, rng: np.random.Generator):
    fg = np.argwhere(mask > 0)
    if len(fg) == 0:
        return garment.copy()
    r0, c0 = fg.min(axis=0)
    r1, c1 = fg.max(axis=0) + 1
    bh, bw = r1 - r0, c1 - c0
    count = rng.integers(_BOX_COUNT[level][0], _BOX_COUNT[level][1] + 1)
    out = garment.copy()
    source = garment.copy()
    for _ in range(count):
        frac = rng.uniform(*_BOX_FRAC[level])
        sh = max(1, int(round(bh * frac)))
        sw = max(1, int(round(bw * frac)))
        if bh - sh < 1 or bw - sw < 1:
            continue
        sy, sx = rng.integers(r0, r1 - sh), rng.integers(c0, c1 - sw)
        dy, dx = rng.integers(r0, r1 - sh), rng.integers(c0, c1 - sw)
        both = (mask[dy : dy + sh, dx : dx + sw] > 0) & (mask[sy : sy + sh, sx : sx + sw] > 0)
        region = out[dy : dy + sh, dx : dx + sw]
        region[both] = source[sy : sy + sh, sx : sx + sw][both]
    return out


def cloth_texture(garment, garment_mask, op: str, level: str = "mild", seed: int = 0,
                  kernel_size: Optional[int] = None):
    """Texture distortion inside the mask: Gaussian blur or box copy-paste."""
    if level not in _BLUR_RANGE:
        raise ValueError(f"unknown level {level!r}")
    g, m = _pix(garment), _pix(garment_mask)
    rng = np.random.default_rng(seed)
    if op == "blur":
        if kernel_size is None:
            lo, hi = _BLUR_RANGE[level]
            kernel_size = int(rng.choice(np.arange(lo, hi + 1, 2)))
        out = masked_blur(g, m, kernel_size)
    elif op == "copy_paste":
        out = _copy_paste(g, m, level, rng)
    else:
        raise ValueError(f"unknown texture op {op!r}")
    return Image(out) if isinstance(garment, Image) else out


# ---------------------------------------------------------------------------
# Distortion suite and probe runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Distortion:
    kind: str
    magnitude: str = "mild"
    params: dict = field(default_factory=dict)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS and self.kind != "none":
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.magnitude not in ("mild", "drastic"):
            raise ValueError(f"unknown magnitude {self.magnitude!r}")

    @property
    def label(self) -> str:
        if self.kind == "cloth_texture":
            return f"{self.kind}_{self.magnitude}"
        return self.kind


_BRIGHT_RANGE = {"mild": (0.6, 1.4), "drastic": (0.3, 1.7)}
_COLOR_RANGE = {"mild": (0.15, 0.3, 0.3), "drastic": (0.5, 0.6, 0.6)}


def apply_distortion(d: Distortion, garment, mask) -> Tuple[object, object]:
    """Deterministic (image, mask) distortion; draws any unset params from the seed."""
    rng = np.random.default_rng(d.rng_seed)
    if d.kind == "none":
        return garment, mask
    if d.kind == "background_brightness":
        factor = d.params.get("factor")
        if factor is None:
            factor = rng.uniform(*_BRIGHT_RANGE[d.magnitude])
        return bg_brightness(garment, mask, factor), mask
    if d.kind == "cloth_color":
        mh, ms, mv = _COLOR_RANGE[d.magnitude]
        dh = d.params.get("dh", rng.uniform(-mh, mh))
        ds = d.params.get("ds", rng.uniform(-ms, ms))
        dv = d.params.get("dv", rng.uniform(-mv, mv))
        return cloth_color(garment, mask, dh=dh, ds=ds, dv=dv), mask
    if d.kind == "cloth_shape":
        op = d.params.get("op") or rng.choice(["rot_scale", "shorten_hem", "tps"])
        params = dict(d.params)
        if op == "rot_scale":
            params.setdefault("angle_deg", rng.uniform(-10.0, 10.0))
            params.setdefault("scale", rng.uniform(0.9, 1.1))
        elif op == "shorten_hem":
            h = _pix(mask).shape[0]
            params.setdefault("rows", int(rng.uniform(0.08, 0.2) * h))
        else:
            params.setdefault("amplitude", rng.uniform(1.0, 3.0))
        return cloth_shape(garment, mask, op, params, seed=int(rng.integers(2**31)))
    if d.kind == "cloth_texture":
        op = d.params.get("op") or rng.choice(["blur", "copy_paste"])
        return (
            cloth_texture(garment, mask, op, level=d.magnitude,
                          seed=int(rng.integers(2**31)), kernel_size=d.params.get("kernel_size")),
            mask,
        )
    raise ValueError(f"unknown distortion kind {d.kind!r}")


def default_suite(seed: int = 0) -> List[Distortion]:
    """One row per sensitivity-table entry: bg, color, shape, texture x2."""
    return [
        Distortion("background_brightness", "mild", rng_seed=_seed_of(seed, "bg")),
        Distortion("cloth_color", "mild", rng_seed=_seed_of(seed, "color")),
        Distortion("cloth_shape", "mild", rng_seed=_seed_of(seed, "shape")),
        Distortion("cloth_texture", "mild", rng_seed=_seed_of(seed, "tex_mild")),
        Distortion("cloth_texture", "drastic", rng_seed=_seed_of(seed, "tex_drastic")),
    ]


def garment_support_mask(image, tol: float = 0.02) -> Mask:
    """Support of a garment photographed on a white background."""
    px = _pix(image)
    support = (np.abs(px - 1.0) > tol).any(axis=2)
    return Mask(support.astype(np.float64))


def run_probe(items: Sequence[Tuple[object, object]], suite: Sequence[Distortion], emb,
              kid_seed: int = 0, dump_dir=None) -> List[Tuple[str, MetricReport]]:
    """Distort every garment per suite entry and score distorted vs original."""
    rows = []
    originals = [_pix(g) for g, _ in items]
    for d in suite:
        distorted = []
        for i, (g, m) in enumerate(items):
            per_item = Distortion(d.kind, d.magnitude, d.params, rng_seed=_seed_of(d.rng_seed, i))
            out = apply_distortion(per_item, g, m)[0]
            distorted.append(_pix(out))
        if dump_dir is not None:
            from .ioutils import save_png

            for i, img in enumerate(distorted[:4]):
                save_png(f"{dump_dir}/{d.label}_{i:02d}.png", img)
        report = evaluate(list(zip(distorted, originals)), emb, kid_seed=kid_seed)
        rows.append((d.label, report))
    return rows


def probe_table_csv(rows) -> str:
    lines = ["distortion,ssim,lpips,dists,fid,kid_x1e3"]
    for label, report in rows:
        lines.append(f"{label},{report.csv_row()}")
    return "\n".join(lines) + "\n"
