"""Dual-branch denoiser: CreationNet + ConditionNet with attention fusion.

Two architecturally identical toy UNets (they differ only in input conv
width): CreationNet denoises the garment latent, ConditionNet runs once per
sample at a fixed t=0 embedding over the concatenated person/mask/agnostic
latents and caches per-layer self-attention keys/values. At every fusion
layer CreationNet's self-attention keys/values are the concatenation of its
own projections and the cached ones; cross-attention over high-level tokens
(patch-encoded garment crop + hashed text embeddings) follows when enabled.

Ablation axes live on :class:`DualUNetConfig`: base vs inpainting creation
input, small vs large scale, high-level truncation, fit vs dilated mask,
masked vs unmasked crop for the image tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import Image
from .ioutils import atomic_write_bytes, sha256_json

TRAINABLE_SELECTIONS = ("cre_ip", "cond", "joint")

_CKPT_MAGIC = b"VTOFFCKP"
_CKPT_VERSION = 1
_TEXT_VOCAB = 512


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DualUNetConfig:
    creation_variant: str = "base"          # base | inpainting
    scale: str = "small"                    # small | large
    high_level: bool = True
    mask_kind: str = "dilated"              # fit | dilated
    ip_input_masked: bool = True
    base_channels: int = 32
    depth: int = 2
    attn_heads: int = 4
    token_count: int = 4
    token_dim: int = 32
    text_token_count: int = 12
    encoder_crop_size: int = 24
    codec_factor: int = 4
    fusion_layer_ids: Optional[Tuple[str, ...]] = None
    # the noise schedule the eps head is calibrated against
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.creation_variant not in ("base", "inpainting"):
            raise ValueError(f"unknown creation variant {self.creation_variant!r}")
        if self.scale not in ("small", "large"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.mask_kind not in ("fit", "dilated"):
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        g = math.isqrt(self.token_count)
        if g * g != self.token_count:
            raise ValueError("token_count must be a perfect square")
        if self.encoder_crop_size % g:
            raise ValueError("encoder_crop_size must divide into the token grid")
        for w in self.level_widths:
            if w % self.attn_heads:
                raise ValueError("attention heads must divide channel widths")

    @classmethod
    def preset(cls, scale: str, **overrides) -> "DualUNetConfig":
        """Small and large model presets; they differ only in width/depth."""
        if scale == "small":
            base = dict(scale="small", base_channels=32, depth=2)
        elif scale == "large":
            base = dict(scale="large", base_channels=64, depth=3)
        else:
            raise ValueError(f"unknown scale {scale!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def latent_channels(self) -> int:
        return 3 * self.codec_factor * self.codec_factor

    @property
    def creation_in_channels(self) -> int:
        if self.creation_variant == "inpainting":
            # noisy latent + downsampled center mask + masked-background latent
            return self.latent_channels + 1 + self.latent_channels
        return self.latent_channels

    @property
    def condition_in_channels(self) -> int:
        # channel concat of person, mask, and agnostic latents
        return 3 * self.latent_channels

    @property
    def level_widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * (1 if i == 0 else 2) for i in range(self.depth))

    @property
    def attn_levels(self) -> Tuple[int, ...]:
        # attention at the two lowest resolutions
        return tuple(range(max(0, self.depth - 2), self.depth))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_layer_ids"] = list(self.fusion_layer_ids) if self.fusion_layer_ids else None
        return d

    def digest(self) -> str:
        return sha256_json(self.to_dict())


# ---------------------------------------------------------------------------
# Token containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HighLevelTokens:
    """Cross-attention inputs: k x d garment-crop tokens and m x d text tokens."""

    image_tokens: torch.Tensor
    text_tokens: torch.Tensor

    def combined(self) -> torch.Tensor:
        return torch.cat([self.image_tokens, self.text_tokens], dim=1)

    def zeroed(self) -> "HighLevelTokens":
        return HighLevelTokens(
            image_tokens=torch.zeros_like(self.image_tokens),
            text_tokens=torch.zeros_like(self.text_tokens),
        )


@dataclass(frozen=True)
class CacheEntry:
    key: torch.Tensor      # (b, n, c) after the layer's K projection
    value: torch.Tensor    # (b, n, c)
    hidden: torch.Tensor   # (b, n, c) normalized tokens entering the attention


@dataclass(frozen=True)
class FeatureCache:
    """Per-fusion-layer ConditionNet features, keyed by CreationNet layer ids."""

    entries: Dict[str, CacheEntry]

    def layer_ids(self) -> Tuple[str, ...]:
        return tuple(self.entries.keys())

    def zeroed(self) -> "FeatureCache":
        return FeatureCache(
            entries={
                lid: CacheEntry(
                    key=torch.zeros_like(e.key),
                    value=torch.zeros_like(e.value),
                    hidden=torch.zeros_like(e.hidden),
                )
                for lid, e in self.entries.items()
            }
        )


@dataclass
class AttentionRecord:
    """Per-layer creation->condition attention maps and creation-side tokens."""

    maps: Dict[str, torch.Tensor]      # (b, n_query, n_cond), rows sum to 1
    queries: Dict[str, torch.Tensor]   # (b, n_query, c) normalized creation tokens
    shapes: Dict[str, Tuple[int, int]]  # layer id -> (h, w) of the query grid


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.base_dim))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, t_dim: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch * 2)
        self.norm2 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.t_proj(F.silu(t_emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class FusionSelfAttention(nn.Module):
    """Self-attention whose K/V can be extended with cached condition features."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _group_norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.view(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x, cond_entry: Optional[CacheEntry] = None, restrict_to_self: bool = False,
                record_map: bool = False):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        own_kv = (k, v)
        n_self = k.shape[1]
        use_cond = cond_entry is not None and not restrict_to_self
        if use_cond:
            k = torch.cat([k, cond_entry.key], dim=1)
            v = torch.cat([v, cond_entry.value], dim=1)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1]), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, n_self, c)
        out = self.proj(out).transpose(1, 2).view(b, c, h, w)

        cond_map = None
        if record_map and use_cond:
            block = attn.mean(dim=1)[:, :, n_self:]
            cond_map = block / (block.sum(dim=-1, keepdim=True) + 1e-12)
        return x + out, own_kv, tokens, cond_map


class CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = _group_norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(token_dim, channels, bias=False)
        self.to_v = nn.Linear(token_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(tokens), self.to_v(tokens)
        dh = c // self.heads
        qh = q.view(b, -1, self.heads, dh).transpose(1, 2)
        kh = k.view(b, -1, self.heads, dh).transpose(1, 2)
        vh = v.view(b, -1, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, -1, c)
        return x + self.proj(out).transpose(1, 2).view(b, c, h, w)


class AttentionStage(nn.Module):
    """Fusion self-attention plus (optionally) token cross-attention, with an id."""

    def __init__(self, layer_id: str, channels: int, cfg: DualUNetConfig):
        super().__init__()
        self.layer_id = layer_id
        self.channels = channels
        self.self_attn = FusionSelfAttention(channels, cfg.attn_heads)
        self.cross_attn = CrossAttention(channels, cfg.token_dim, cfg.attn_heads) if cfg.high_level else None


class UNetBranch(nn.Module):
    """Two-to-three level UNet with attention at the lowest resolutions."""

    def __init__(self, in_channels: int, out_channels: int, cfg: DualUNetConfig):
        super().__init__()
        widths = cfg.level_widths
        t_dim = cfg.base_channels * 4
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.base_channels, t_dim)
        self.in_conv = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            # in_conv yields widths[0]; each downsample conv already maps to the next width
            self.down_res.append(ResBlock(w, w, t_dim))
            if i in cfg.attn_levels:
                self.down_attn[f"down{i}"] = AttentionStage(f"down{i}.attn", w, cfg)
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))

        wl = widths[-1]
        self.mid_res1 = ResBlock(wl, wl, t_dim)
        self.mid_attn = AttentionStage("mid.attn", wl, cfg)
        self.mid_res2 = ResBlock(wl, wl, t_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up_res.append(ResBlock(widths[i] * 2, widths[i], t_dim))
            if i in cfg.attn_levels:
                self.up_attn[f"up{i}"] = AttentionStage(f"up{i}.attn", widths[i], cfg)
            if i > 0:
                self.ups.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))

        self.out_norm = _group_norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], out_channels, 3, padding=1)
        # time-gated full-rank path from the raw input to the output, so the
        # head is not limited by the in_conv channel bottleneck
        self.skip_gate = nn.Linear(t_dim, in_channels)
        self.skip_out = nn.Conv2d(in_channels, out_channels, 1)
        self.attn_ids = self._collect_attn_ids()

    def _collect_attn_ids(self) -> Tuple[str, ...]:
        ids: List[str] = []
        for i in range(self.cfg.depth):
            if i in self.cfg.attn_levels:
                ids.append(f"down{i}.attn")
        ids.append("mid.attn")
        for i in reversed(range(self.cfg.depth)):
            if i in self.cfg.attn_levels:
                ids.append(f"up{i}.attn")
        return tuple(ids)

    def _run_attention(self, stage: AttentionStage, h, tokens, cache, fusion_ids,
                       restrict_to_self, record, collected):
        entry = None
        if cache is not None and stage.layer_id in fusion_ids:
            if stage.layer_id not in cache.entries:
                raise KeyError(f"feature cache missing layer {stage.layer_id!r}")
            entry = cache.entries[stage.layer_id]
        want_map = record is not None
        h, own_kv, hidden, cond_map = stage.self_attn(
            h, entry, restrict_to_self=restrict_to_self, record_map=want_map
        )
        if collected is not None:
            collected[stage.layer_id] = CacheEntry(key=own_kv[0], value=own_kv[1], hidden=hidden)
        if record is not None:
            record.queries[stage.layer_id] = hidden
            record.shapes[stage.layer_id] = (h.shape[2], h.shape[3])
            if cond_map is not None:
                record.maps[stage.layer_id] = cond_map
        if stage.cross_attn is not None and tokens is not None:
            h = stage.cross_attn(h, tokens)
        return h

    def forward(self, x, t, tokens=None, cache=None, fusion_ids=(), capture=False,
                record: Optional[AttentionRecord] = None, restrict_to_self=False):
        collected: Optional[Dict[str, CacheEntry]] = {} if capture else None
        t_emb = self.time_embed(t)
        h = self.in_conv(x)
        skips = []
        for i in range(self.cfg.depth):
            h = self.down_res[i](h, t_emb)
            key = f"down{i}"
            if key in self.down_attn:
                h = self._run_attention(self.down_attn[key], h, tokens, cache, fusion_ids,
                                        restrict_to_self, record, collected)
            skips.append(h)
            if i < self.cfg.depth - 1:
                h = self.downs[i](h)

        h = self.mid_res1(h, t_emb)
        h = self._run_attention(self.mid_attn, h, tokens, cache, fusion_ids,
                                restrict_to_self, record, collected)
        h = self.mid_res2(h, t_emb)

        for j, i in enumerate(reversed(range(self.cfg.depth))):
            h = torch.cat([h, skips[i]], dim=1)
            h = self.up_res[j](h, t_emb)
            key = f"up{i}"
            if key in self.up_attn:
                h = self._run_attention(self.up_attn[key], h, tokens, cache, fusion_ids,
                                        restrict_to_self, record, collected)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        out = out + self.skip_out(x * self.skip_gate(F.silu(t_emb))[:, :, None, None])
        return out, (FeatureCache(entries=collected) if capture else None)


# ---------------------------------------------------------------------------
# Token encoders
# ---------------------------------------------------------------------------

class PatchTokenEncoder(nn.Module):
    """Trainable patch tokens from the encoder crop (IP-adapter stand-in)."""

    def __init__(self, cfg: DualUNetConfig):
        super().__init__()
        g = math.isqrt(cfg.token_count)
        self.grid = g
        self.patch = cfg.encoder_crop_size // g
        self.proj = nn.Linear(3 * self.patch * self.patch, cfg.token_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.token_count, cfg.token_dim))

    def forward(self, crop: torch.Tensor) -> torch.Tensor:
        b = crop.shape[0]
        p, g = self.patch, self.grid
        x = crop.view(b, 3, g, p, g, p).permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, 3 * p * p)
        return self.proj(x) + self.pos[None]


def _stable_token_id(word: str) -> int:
    digest = hashlib.md5(word.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % _TEXT_VOCAB


class HashedTextEmbedding(nn.Module):
    """Deterministic hashed embedding table over whitespace tokens."""

    def __init__(self, cfg: DualUNetConfig):
        super().__init__()
        self.max_tokens = cfg.text_token_count
        self.table = nn.Embedding(_TEXT_VOCAB, cfg.token_dim)

    def forward(self, prompts) -> torch.Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        out = torch.zeros(len(prompts), self.max_tokens, self.table.embedding_dim)
        for i, prompt in enumerate(prompts):
            words = prompt.split()[: self.max_tokens]
            if words:
                ids = torch.tensor([_stable_token_id(w) for w in words], dtype=torch.long)
                out[i, : len(ids)] = self.table(ids)
        return out


# ---------------------------------------------------------------------------
# The dual model
# ---------------------------------------------------------------------------

class DualUNet(nn.Module):
    def __init__(self, config: DualUNetConfig):
        super().__init__()
        self.config = config
        beta = np.linspace(config.beta_start, config.beta_end, config.schedule_steps)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])  # index 0 = t=0
        self.register_buffer("alpha_bar", torch.tensor(alpha_bar, dtype=torch.float32))
        self.creation = UNetBranch(config.creation_in_channels, config.latent_channels, config)
        self.condition = UNetBranch(config.condition_in_channels, config.latent_channels, config)
        if config.high_level:
            self.image_tokens = PatchTokenEncoder(config)
            self.text_tokens = HashedTextEmbedding(config)
        else:
            self.image_tokens = None
            self.text_tokens = None
        all_ids = self.creation.attn_ids
        if config.fusion_layer_ids is not None:
            unknown = set(config.fusion_layer_ids) - set(all_ids)
            if unknown:
                raise ValueError(f"unknown fusion layer ids: {sorted(unknown)}")
            self.fusion_layer_ids = tuple(i for i in all_ids if i in config.fusion_layer_ids)
        else:
            self.fusion_layer_ids = all_ids

    # -- high-level tokens ---------------------------------------------------

    def encode_high_level(self, crop, prompt) -> HighLevelTokens:
        """Image tokens from the garment crop plus hashed text tokens."""
        if not self.config.high_level:
            raise RuntimeError("high-level features are truncated in this config")
        if isinstance(crop, Image):
            crop = torch.from_numpy(crop.pixels).float().permute(2, 0, 1)[None]
        elif isinstance(crop, np.ndarray):
            crop = torch.from_numpy(np.ascontiguousarray(crop)).float().permute(2, 0, 1)[None]
        return HighLevelTokens(image_tokens=self.image_tokens(crop), text_tokens=self.text_tokens(prompt))

    def encode_text(self, prompts) -> Optional[torch.Tensor]:
        if not self.config.high_level:
            return None
        return self.text_tokens(prompts)

    # -- condition branch ----------------------------------------------------

    def encode_condition(self, cond_latents: torch.Tensor, cond_text_tokens=None) -> FeatureCache:
        """One ConditionNet pass at the fixed t=0 embedding; caches fusion K/V."""
        if cond_latents.shape[1] != self.config.condition_in_channels:
            raise ValueError(
                f"condition input must have {self.config.condition_in_channels} channels, "
                f"got {cond_latents.shape[1]}"
            )
        t = torch.zeros(cond_latents.shape[0], dtype=torch.long)
        _, cache = self.condition(cond_latents, t, tokens=cond_text_tokens, capture=True)
        return FeatureCache(entries={lid: cache.entries[lid] for lid in self.fusion_layer_ids})

    # -- creation branch -----------------------------------------------------

    def predict_eps(self, z_t: torch.Tensor, t, cache: Optional[FeatureCache] = None,
                    tokens: Optional[HighLevelTokens] = None, extra_channels=None,
                    record_attention: bool = False, restrict_to_self: bool = False):
        """Noise prediction with fused condition features.

        Returns (eps_pred, AttentionRecord|None); the record holds the
        renormalized creation->condition attention rows per fusion layer and
        the creation-side tokens the flow adapter consumes.
        """
        if isinstance(t, int):
            t = torch.full((z_t.shape[0],), t, dtype=torch.long)
        x = z_t
        if self.config.creation_variant == "inpainting":
            if extra_channels is None:
                raise ValueError("inpainting variant requires background prior channels")
            x = torch.cat([z_t, extra_channels], dim=1)
        elif extra_channels is not None:
            raise ValueError("base variant takes no extra channels")
        token_mat = tokens.combined() if (tokens is not None and self.config.high_level) else None
        record = AttentionRecord(maps={}, queries={}, shapes={}) if record_attention else None
        raw, _ = self.creation(
            x, t, tokens=token_mat, cache=cache, fusion_ids=self.fusion_layer_ids,
            record=record, restrict_to_self=restrict_to_self,
        )
        # velocity-style head: eps = sqrt(1-abar) z_t + sqrt(abar) F keeps the
        # network target unit-scale at every timestep
        ab = self.alpha_bar[t].to(raw.dtype)[:, None, None, None]
        eps = (1.0 - ab).sqrt() * z_t + ab.sqrt() * raw
        return eps, record

    def noise_schedule(self):
        """The NoiseSchedule this model's eps head is calibrated against."""
        from .diffusion import make_schedule

        return make_schedule(self.config.schedule_steps, self.config.beta_start, self.config.beta_end)

    def fusion_channels(self) -> Dict[str, int]:
        """Channel width at each fusion layer, in forward order."""
        stages: Dict[str, int] = {}
        branch = self.creation
        for stage in list(branch.down_attn.values()) + [branch.mid_attn] + list(branch.up_attn.values()):
            stages[stage.layer_id] = stage.channels
        return {lid: stages[lid] for lid in self.fusion_layer_ids}

    # -- parameter partitions --------------------------------------------------

    def condition_dead_parameters(self) -> frozenset:
        """ConditionNet parameters that cannot receive gradients.

        Only the cached fusion-layer features leave the condition branch (its
        denoising output is discarded), so everything strictly downstream of
        the last captured tensor is structurally unreachable. Found once by an
        autograd reachability probe and excluded from every trainable set.
        """
        if getattr(self, "_cond_dead", None) is None:
            side = 2 ** self.config.depth
            dummy = torch.randn((1, self.config.condition_in_channels, side, side))
            tokens = (
                torch.randn((1, self.config.text_token_count, self.config.token_dim))
                if self.config.high_level else None
            )
            flags = [(p, p.requires_grad) for p in self.condition.parameters()]
            for p, _ in flags:
                p.requires_grad_(True)
            cache = self.encode_condition(dummy, tokens)
            total = sum((e.key.sum() + e.value.sum() + e.hidden.sum()) for e in cache.entries.values())
            named = [(f"condition.{n}", p) for n, p in self.condition.named_parameters()]
            grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)
            dead = frozenset(n for (n, _), g in zip(named, grads) if g is None)
            for p, flag in flags:
                p.requires_grad_(flag)
            self._cond_dead = dead
        return self._cond_dead

    def parameter_partition(self, selection: str):
        """(trainable, frozen) name->parameter dicts for a curriculum selection.

        cre_ip = CreationNet + token encoders; cond = the reachable part of
        ConditionNet; joint = their union. The partitions are disjoint and
        joint is exactly cre_ip + cond.
        """
        if selection not in TRAINABLE_SELECTIONS:
            raise ValueError(f"unknown trainable selection {selection!r}")
        cre_prefixes = ("creation.", "image_tokens.", "text_tokens.")
        dead = self.condition_dead_parameters()
        trainable, frozen = {}, {}
        for name, p in self.named_parameters():
            in_cre = name.startswith(cre_prefixes)
            in_cond = name.startswith("condition.") and name not in dead
            wanted = (
                (selection == "cre_ip" and in_cre)
                or (selection == "cond" and in_cond)
                or (selection == "joint" and (in_cre or in_cond))
            )
            (trainable if wanted else frozen)[name] = p
        return trainable, frozen


def build(config: DualUNetConfig, rng_seed: int) -> DualUNet:
    """Deterministically initialized dual model (seeds torch's global RNG)."""
    torch.manual_seed(rng_seed)
    return DualUNet(config)


def encode_condition(model: DualUNet, cond_latents, cond_text_tokens=None) -> FeatureCache:
    return model.encode_condition(cond_latents, cond_text_tokens)


def predict_eps(model: DualUNet, z_t, t, cache=None, tokens=None, **kw):
    return model.predict_eps(z_t, t, cache=cache, tokens=tokens, **kw)


def encode_high_level(model: DualUNet, crop, prompt) -> HighLevelTokens:
    return model.encode_high_level(crop, prompt)


def select_trainable(model: DualUNet, selection: str):
    return model.parameter_partition(selection)


def apply_selection(model: DualUNet, selection: str):
    """Set requires_grad according to the selection; returns (trainable, frozen)."""
    trainable, frozen = model.parameter_partition(selection)
    for p in trainable.values():
        p.requires_grad_(True)
    for p in frozen.values():
        p.requires_grad_(False)
    return trainable, frozen


def parameter_count(params) -> int:
    return sum(int(np.prod(p.shape)) for p in params.values())


# ---------------------------------------------------------------------------
# Checkpoint format: versioned header + named float32 blobs
# ---------------------------------------------------------------------------

def _state_blobs(model: DualUNet, adapter=None) -> Dict[str, torch.Tensor]:
    blobs = {f"model.{k}": v for k, v in model.state_dict().items()}
    if adapter is not None:
        blobs.update({f"adapter.{k}": v for k, v in adapter.state_dict().items()})
    return blobs


def save_checkpoint(path, model: DualUNet, stage: int, step: int, adapter=None) -> None:
    blobs = _state_blobs(model, adapter)
    names = sorted(blobs.keys())
    header = {
        "format": "vtoff-checkpoint",
        "version": _CKPT_VERSION,
        "config_digest": model.config.digest(),
        "config": model.config.to_dict(),
        "stage": stage,
        "step": step,
        "tensors": [[n, list(blobs[n].shape)] for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(header_bytes)), header_bytes]
    for n in names:
        parts.append(blobs[n].detach().cpu().contiguous().to(torch.float32).numpy().tobytes())
    atomic_write_bytes(path, b"".join(parts))


class CheckpointError(RuntimeError):
    pass


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        return json.loads(f.read(hlen).decode("utf-8"))


def load_checkpoint(path, model: DualUNet, adapter=None) -> dict:
    """Restore parameters bit-exactly; rejects config-digest mismatch."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, hlen = struct.unpack("<II", data[len(_CKPT_MAGIC) : len(_CKPT_MAGIC) + 8])
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = len(_CKPT_MAGIC) + 8
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    if header["config_digest"] != model.config.digest():
        raise CheckpointError(
            "checkpoint config digest mismatch: "
            f"{header['config_digest'][:12]} != {model.config.digest()[:12]}"
        )
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=np.float32, count=count, offset=off).reshape(shape)
        off += count * 4
        tensors[name] = torch.from_numpy(arr.copy())
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(model_state)
    if adapter is not None:
        adapter_state = {k[len("adapter."):]: v for k, v in tensors.items() if k.startswith("adapter.")}
        if adapter_state:
            adapter.load_state_dict(adapter_state)
    return header
