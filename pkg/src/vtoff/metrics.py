"""Image-quality metric suite with pluggable feature embedders.

Pairwise metrics (SSIM, LPIPS-style, DISTS-style) plus population metrics
(FID, KID). Embedders are plugins: the desk-scale default is a fixed seeded
random convolutional stack, so absolute values differ from pretrained-backbone
numbers; identities, closed-form oracles, and orderings under controlled
distortions are what this module guarantees. Real pretrained features can be
supplied through the n x d binary feature-file interface.

KID follows the equal-sample-size unbiased MMD^2 with the degree-3 polynomial
kernel k(x,y) = (x.y/d + 1)^3, the diagonal excluded in all three terms, and
is reported x 10^3 averaged over subset runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .conditioning import Image
from .ioutils import atomic_write_bytes
from .resample import bilinear_resize

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_DISTS_EPS = 1e-6
_FEATFILE_MAGIC = b"VTFF"


def _pixels(x) -> np.ndarray:
    if isinstance(x, Image):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------

class IdentityEmbedder:
    """Features are the raw pixels; pooled vector is the per-channel mean."""

    name = "identity"

    def features(self, pixels) -> List[np.ndarray]:
        return [_pixels(pixels)]

    def pooled(self, pixels) -> np.ndarray:
        return _pixels(pixels).mean(axis=(0, 1))


class RandomConvEmbedder:
    """Fixed seeded random conv stack (stride-2 levels, ReLU), deterministic."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (8, 16, 32), pooled_dim: int = 16):
        self.name = f"randconv-{seed}"
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        self.kernels = []
        c_in = 3
        for c_out in self.widths:
            w = rng.standard_normal((3, 3, c_in, c_out)) / np.sqrt(9 * c_in)
            self.kernels.append(w)
            c_in = c_out
        self.proj = rng.standard_normal((self.widths[-1], pooled_dim)) / np.sqrt(self.widths[-1])

    @staticmethod
    def _conv_s2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        win = sliding_window_view(pad, (3, 3), axis=(0, 1))
        out = np.einsum("hwcij,ijco->hwo", win, w)
        return np.maximum(out[::2, ::2], 0.0)

    def features(self, pixels) -> List[np.ndarray]:
        x = _pixels(pixels)
        feats = []
        for w in self.kernels:
            x = self._conv_s2(x, w)
            feats.append(x)
        return feats

    def pooled(self, pixels) -> np.ndarray:
        return self.features(pixels)[-1].mean(axis=(0, 1)) @ self.proj


# ---------------------------------------------------------------------------
# Pairwise metrics
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()

_SSIM_WINDOW = _gaussian_window()


def ssim(x, y) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=.01 K2=.03, range 1."""
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = []
    for c in range(a.shape[2]):
        xc, yc = a[..., c], b[..., c]
        f = lambda im: ndimage.correlate(im, _SSIM_WINDOW, mode="reflect")
        mu_x, mu_y = f(xc), f(yc)
        var_x = f(xc * xc) - mu_x * mu_x
        var_y = f(yc * yc) - mu_y * mu_y
        cov = f(xc * yc) - mu_x * mu_y
        lum = (2.0 * mu_x * mu_y + _SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + _SSIM_C1)
        cs = (2.0 * cov + _SSIM_C2) / (var_x + var_y + _SSIM_C2)
        vals.append((lum * cs).mean())
    return float(np.mean(vals))


def lpips_like(x, y, emb) -> float:
    """Channel-normalized feature differences, spatially averaged, layer-summed."""
    total = 0.0
    for fa, fb in zip(emb.features(x), emb.features(y)):
        na = fa / (np.linalg.norm(fa, axis=-1, keepdims=True) + 1e-10)
        nb = fb / (np.linalg.norm(fb, axis=-1, keepdims=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(axis=-1).mean())
    return total


def _global_stats(a: np.ndarray, b: np.ndarray):
    n = a.size
    mu_a, mu_b = a.mean(), b.mean()
    ddof = 1 if n > 1 else 0
    var_a = ((a - mu_a) * (a - mu_a)).sum() / max(n - ddof, 1)
    var_b = ((b - mu_b) * (b - mu_b)).sum() / max(n - ddof, 1)
    cov = ((a - mu_a) * (b - mu_b)).sum() / max(n - ddof, 1)
    return mu_a, mu_b, var_a, var_b, cov


def dists_like(x, y, emb) -> float:
    """1 - mean of per-channel texture/structure similarity (equal weights).

    Computed at native resolution. Texture uses global feature means,
    structure global covariances; negatively correlated channels clamp to 0
    similarity, so the distance stays in [0, 1] for nonnegative features.
    """
    sims = []
    for fa, fb in zip(emb.features(x), emb.features(y)):
        if fa.ndim == 2:
            fa, fb = fa[..., None], fb[..., None]
        for c in range(fa.shape[2]):
            mu_a, mu_b, var_a, var_b, cov = _global_stats(fa[..., c], fb[..., c])
            texture = (2.0 * mu_a * mu_b + _DISTS_EPS) / (mu_a * mu_a + mu_b * mu_b + _DISTS_EPS)
            structure = (2.0 * cov + _DISTS_EPS) / (var_a + var_b + _DISTS_EPS)
            sims.append(0.5 * max(texture, 0.0) + 0.5 * max(structure, 0.0))
    return float(1.0 - np.mean(sims))


# ---------------------------------------------------------------------------
# Population metrics
# ---------------------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Frechet distance between two Gaussians given their moments.

    The trace term uses the eigendecomposition of the symmetrized product
    sqrt(Sa) Sb sqrt(Sa) with negative eigenvalues clamped to 0.
    """
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    sigma_a = np.asarray(sigma_a, dtype=np.float64)
    sigma_b = np.asarray(sigma_b, dtype=np.float64)
    diff = mu_a - mu_b
    root_a = _sqrtm_psd(sigma_a)
    inner = root_a @ sigma_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    return float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_sqrt)


def fid(feats_a, feats_b, eps: float = 1e-6) -> float:
    """FID from raw feature populations; covariances use the (n-1) estimator + eps*I."""
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature sets must be n x d with matching d")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least 2 samples per population")
    d = fa.shape[1]
    reg = eps * np.eye(d)
    return fid_from_moments(
        fa.mean(axis=0), np.cov(fa, rowvar=False) + reg,
        fb.mean(axis=0), np.cov(fb, rowvar=False) + reg,
    )


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Equal-size unbiased MMD^2; the diagonal is excluded in every term."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("unbiased estimator needs equal sample counts")
    if n < 2:
        raise ValueError("need at least 2 samples")
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    off = lambda k: (k.sum() - np.trace(k)) / (n * (n - 1))
    return float(off(kxx) + off(kyy) - 2.0 * off(kxy))


def kid(feats_a, feats_b, subset_size: Optional[int] = None, runs: int = 10,
        rng_seed: int = 0) -> Tuple[float, np.ndarray]:
    """(mean x 10^3, per-run values x 10^3) over subset draws without replacement."""
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    n, m = fa.shape[0], fb.shape[0]
    if subset_size is None:
        subset_size = min(1000, n, m)
    if subset_size < 2:
        raise ValueError("subset_size must be >= 2")
    if subset_size > min(n, m):
        raise ValueError("subset_size exceeds population size")
    rng = np.random.default_rng(rng_seed)
    values = []
    for _ in range(runs):
        ia = rng.choice(n, size=subset_size, replace=False)
        ib = rng.choice(m, size=subset_size, replace=False)
        values.append(mmd2_unbiased(fa[ia], fb[ib]) * 1e3)
    values = np.asarray(values)
    return float(values.mean()), values


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    ssim: float
    lpips: float
    dists: float
    fid: float
    kid_mean: float
    kid_runs: Tuple[float, ...]
    pairs: int = 0
    embedder: str = ""

    def to_dict(self) -> dict:
        return {
            "ssim": self.ssim,
            "lpips": self.lpips,
            "dists": self.dists,
            "fid": self.fid,
            "kid_mean": self.kid_mean,
            "kid_runs": list(self.kid_runs),
            "pairs": self.pairs,
            "embedder": self.embedder,
        }

    def csv_row(self) -> str:
        return ",".join(
            f"{v:.6f}" for v in (self.ssim, self.lpips, self.dists, self.fid, self.kid_mean)
        )


CSV_HEADER = "ssim,lpips,dists,fid,kid_x1e3"


def evaluate(pairs, emb, kid_subset: Optional[int] = None, kid_runs: int = 10,
             kid_seed: int = 0, resize_to: Optional[Tuple[int, int]] = None) -> MetricReport:
    """Average pairwise metrics + population FID/KID over (generated, reference) pairs.

    ``resize_to=(h, w)`` resizes both populations first (e.g. (341, 256) to
    replicate the legacy resized-DISTS protocol); the default evaluates at
    native resolution.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    gens, refs = [], []
    for g, r in pairs:
        gp, rp = _pixels(g), _pixels(r)
        if resize_to is not None:
            gp = np.clip(bilinear_resize(gp, *resize_to), 0.0, 1.0)
            rp = np.clip(bilinear_resize(rp, *resize_to), 0.0, 1.0)
        gens.append(gp)
        refs.append(rp)

    ssim_v = float(np.mean([ssim(g, r) for g, r in zip(gens, refs)]))
    lpips_v = float(np.mean([lpips_like(g, r, emb) for g, r in zip(gens, refs)]))
    dists_v = float(np.mean([dists_like(g, r, emb) for g, r in zip(gens, refs)]))

    feats_g = np.stack([emb.pooled(g) for g in gens])
    feats_r = np.stack([emb.pooled(r) for r in refs])
    fid_v = fid(feats_g, feats_r)
    kid_mean, kid_vals = kid(feats_g, feats_r, subset_size=kid_subset, runs=kid_runs, rng_seed=kid_seed)
    return MetricReport(
        ssim=ssim_v, lpips=lpips_v, dists=dists_v, fid=fid_v,
        kid_mean=kid_mean, kid_runs=tuple(float(v) for v in kid_vals),
        pairs=len(pairs), embedder=getattr(emb, "name", "custom"),
    )


# ---------------------------------------------------------------------------
# External feature files: header + row-major float32
# ---------------------------------------------------------------------------

def save_features(path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(feats, dtype=np.float32))
    if arr.ndim != 2:
        raise ValueError("feature array must be n x d")
    header = _FEATFILE_MAGIC + struct.pack("<IQQ", 1, arr.shape[0], arr.shape[1])
    atomic_write_bytes(path, header + arr.tobytes())


def load_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _FEATFILE_MAGIC:
        raise ValueError(f"not a feature file: {path}")
    version, n, d = struct.unpack("<IQQ", data[4:24])
    if version != 1:
        raise ValueError(f"unsupported feature file version {version}")
    return np.frombuffer(data, dtype=np.float32, count=n * d, offset=24).reshape(n, d).copy()
