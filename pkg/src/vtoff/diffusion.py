"""Discrete-time latent diffusion machinery.

The latent codec is a fixed orthogonal patch transform (not learned), so
codec error never confounds training diagnostics: f x f x 3 pixel patches are
flattened and mixed by a seeded orthogonal matrix, giving exact linear
round trips. The schedule is a linear-beta DDPM schedule and sampling is the
deterministic DDIM update with classifier-free guidance; the unconditional
pass zeroes the condition branch features and drops the high-level tokens.

Scalar-coefficient math here works on numpy arrays, torch tensors, or
:class:`Latent` wrappers alike.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .conditioning import Image

_ALPHA_BAR_FLOOR = 1e-12
_CODEC_SEED = 0x5EED


@dataclass(frozen=True)
class Latent:
    """h x w x c latent patch grid; spatial dims are image dims / scale_factor."""

    values: np.ndarray
    scale_factor: int = 4


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; ``alpha_bar[t-1]`` is the cumulative signal at step t."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T:
            raise ValueError("schedule arrays must have length T")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("betas must lie strictly in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def alpha_bar_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    cfg_scale: float = 2.0
    seed: int = 42

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0.0:
            raise ValueError("cfg_scale must be >= 0")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------

class LatentCodec:
    """Invertible image <-> latent map with spatial downsample ``factor``."""

    def __init__(self, factor: int = 4):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor
        self.channels = 3 * factor * factor
        rng = np.random.default_rng(_CODEC_SEED)
        q, _ = np.linalg.qr(rng.standard_normal((self.channels, self.channels)))
        self._mix = q

    def encode(self, image) -> Latent:
        px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        h, w = px.shape[:2]
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"dims {h}x{w} not divisible by codec factor {f}")
        patches = px.reshape(h // f, f, w // f, f, 3).transpose(0, 2, 1, 3, 4)
        flat = patches.reshape(h // f, w // f, self.channels)
        return Latent(values=flat @ self._mix, scale_factor=f)

    def decode(self, latent) -> Image:
        vals = latent.values if isinstance(latent, Latent) else np.asarray(latent)
        vals = np.asarray(vals, dtype=np.float64)
        h, w = vals.shape[:2]
        f = self.factor
        patches = (vals @ self._mix.T).reshape(h, w, f, f, 3)
        px = patches.transpose(0, 2, 1, 3, 4).reshape(h * f, w * f, 3)
        return Image(np.clip(px, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Forward/backward algebra
# ---------------------------------------------------------------------------

def _unwrap(x):
    if isinstance(x, Latent):
        return x.values, lambda v: Latent(values=v, scale_factor=x.scale_factor)
    return x, lambda v: v


def add_noise(z0, eps, t: int, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    ab = sched.alpha_bar_at(t)
    v0, wrap = _unwrap(z0)
    ve, _ = _unwrap(eps)
    return wrap(float(np.sqrt(ab)) * v0 + float(np.sqrt(1.0 - ab)) * ve)


def diffusion_loss(eps, eps_pred):
    """Mean squared error over all elements."""
    a, _ = _unwrap(eps)
    b, _ = _unwrap(eps_pred)
    return ((a - b) ** 2).mean()


def predict_x0(z_t, eps_pred, t: int, sched: NoiseSchedule):
    """Invert add_noise given a noise estimate; tiny abar is floored with a warning."""
    ab = sched.alpha_bar_at(t)
    if ab < _ALPHA_BAR_FLOOR:
        warnings.warn(f"alpha_bar at t={t} below numeric floor; clamped", RuntimeWarning)
        ab = _ALPHA_BAR_FLOOR
    vz, wrap = _unwrap(z_t)
    ve, _ = _unwrap(eps_pred)
    return wrap((vz - float(np.sqrt(1.0 - ab)) * ve) / float(np.sqrt(ab)))


def ddim_timesteps(T: int, steps: int) -> list:
    """``steps`` uniformly spaced integer timesteps from T down to 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps ({steps}) may not exceed schedule length T ({T})")
    if steps == 1:
        return [T]
    ts = [int(round(v)) for v in np.linspace(T, 1, steps)]
    assert all(a > b for a, b in zip(ts, ts[1:]))
    return ts


def ddim_update(z, eps, alpha_bar_t: float, alpha_bar_prev: float):
    """One deterministic DDIM step: re-noise the implied x0 to the previous level."""
    x0 = (z - float(np.sqrt(1.0 - alpha_bar_t)) * eps) / float(np.sqrt(alpha_bar_t))
    return float(np.sqrt(alpha_bar_prev)) * x0 + float(np.sqrt(1.0 - alpha_bar_prev)) * eps


def sample(model, condition, cfg: SamplerConfig, sched: NoiseSchedule = None,
           codec: LatentCodec = None) -> Image:
    """Deterministic guided DDIM sampling of one garment image.

    ``condition`` bundles the conditioning tensors (see vtoff.pipeline);
    guidance uses eps_u + s (eps_c - eps_u). Scale 1 runs the conditional
    pass only and scale 0 the unconditional pass only, so those cases are
    bit-identical to single-branch sampling. Schedule and codec default to
    the ones the model was built for.
    """
    if sched is None:
        sched = model.noise_schedule()
    if codec is None:
        codec = LatentCodec(model.config.codec_factor)
    ts = ddim_timesteps(sched.T, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    b, _, h, w = condition.cond_latents.shape
    z = torch.randn((b, model.config.latent_channels, h, w), generator=gen)

    scale = float(cfg.cfg_scale)
    with torch.no_grad():
        cache = model.encode_condition(condition.cond_latents, condition.cond_text_tokens)
        tokens = condition.tokens
        need_uncond = scale != 1.0
        if need_uncond:
            cache_u = cache.zeroed()
            tokens_u = tokens.zeroed() if tokens is not None else None
        for i, t in enumerate(ts):
            tt = torch.full((b,), t, dtype=torch.long)
            if scale == 0.0:
                eps, _ = model.predict_eps(z, tt, cache_u, tokens_u, extra_channels=condition.creation_extra)
            elif scale == 1.0:
                eps, _ = model.predict_eps(z, tt, cache, tokens, extra_channels=condition.creation_extra)
            else:
                eps_u, _ = model.predict_eps(z, tt, cache_u, tokens_u, extra_channels=condition.creation_extra)
                eps_c, _ = model.predict_eps(z, tt, cache, tokens, extra_channels=condition.creation_extra)
                eps = eps_u + scale * (eps_c - eps_u)
            ab_prev = sched.alpha_bar_at(ts[i + 1]) if i + 1 < len(ts) else 1.0
            z = ddim_update(z, eps, sched.alpha_bar_at(t), ab_prev)

    vals = z[0].permute(1, 2, 0).numpy().astype(np.float64)
    return codec.decode(Latent(values=vals, scale_factor=codec.factor))
