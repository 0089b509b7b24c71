"""Attention-to-flow warping loss.

Row-stochastic creation->condition attention maps are turned into flow
fields by taking the attention-weighted expectation of a normalized
coordinate map (a soft-argmax), upsampled to pixel space, and used to
grid-sample the isolated garment; the squared-L2 gap to the ground-truth
garment, mean per pixel and summed over the selected layers, is the loss.

A small dedicated adapter (its own Q/K projections, heads averaged into one
map per layer) produces the training-time maps; its parameters never
participate in inference. Coordinates are (x, y) in [-1, 1] with exact +/-1
corners, matching torch grid_sample with align_corners=True; out-of-range
samples clamp to the border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import Image

_ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class CoordinateMap:
    """h x w x 2 grid of normalized (x, y) coordinates, linearly spaced."""

    coords: np.ndarray

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class FlowField:
    """h x w x 2 normalized sampling coordinates (convex combinations of a CoordinateMap)."""

    flow: np.ndarray


@dataclass(frozen=True)
class LeffaConfig:
    layer_ids: Tuple[str, ...]
    heads: int = 2
    head_dim: int = 256
    adapter_lr: float = 5e-3
    weight: float = 1e-3

    def __post_init__(self):
        if not self.layer_ids:
            raise ValueError("layer_ids must be nonempty")
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")
        if self.adapter_lr <= 0 or self.weight < 0:
            raise ValueError("hyperparameters must be positive")


def _sym_linspace(n: int) -> np.ndarray:
    # antisymmetric by construction so the grid centroid is exactly 0
    ramp = np.linspace(-1.0, 1.0, n)
    return (ramp - ramp[::-1]) / 2.0


def make_coordinate_map(h: int, w: int) -> CoordinateMap:
    if h < 1 or w < 1:
        raise ValueError("coordinate map dims must be >= 1")
    xs = _sym_linspace(w)
    ys = _sym_linspace(h)
    gx, gy = np.meshgrid(xs, ys)
    return CoordinateMap(coords=np.stack([gx, gy], axis=-1))


def attention_to_flow(attn, cmap: CoordinateMap, query_hw: Optional[Tuple[int, int]] = None) -> FlowField:
    """Soft-argmax flow: row i of the flow is sum_j attn[i, j] * C[j]."""
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"attention must be 2-D, got shape {a.shape}")
    nk = cmap.height * cmap.width
    if a.shape[1] != nk:
        raise ValueError(f"attention has {a.shape[1]} key positions, coordinate map has {nk}")
    row_sums = a.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > _ROW_SUM_TOL):
        raise ValueError("attention rows must sum to 1")
    if query_hw is None:
        if a.shape[0] == nk:
            query_hw = (cmap.height, cmap.width)
        else:
            side = math.isqrt(a.shape[0])
            if side * side != a.shape[0]:
                raise ValueError("cannot infer query grid shape; pass query_hw")
            query_hw = (side, side)
    flow = a @ cmap.coords.reshape(nk, 2)
    return FlowField(flow=flow.reshape(query_hw[0], query_hw[1], 2))


def upsample_flow(flow: FlowField, target_hw: Tuple[int, int]) -> FlowField:
    """Bilinear per-channel upsampling; endpoints preserved (corner-aligned)."""
    f = flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    h, w = target_hw
    if (f.shape[0], f.shape[1]) == (h, w):
        return FlowField(flow=f.copy())
    t = torch.from_numpy(np.ascontiguousarray(f)).double().permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)
    return FlowField(flow=out[0].permute(1, 2, 0).numpy())


def warp(image, flow):
    """Bilinear grid sampling of ``image`` at the flow's normalized coordinates."""
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    f = flow.flow if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    squeeze = px.ndim == 2
    if squeeze:
        px = px[..., None]
    img_t = torch.from_numpy(np.ascontiguousarray(px)).double().permute(2, 0, 1)[None]
    grid = torch.from_numpy(np.ascontiguousarray(f)).double()[None]
    out = F.grid_sample(img_t, grid, mode="bilinear", padding_mode="border", align_corners=True)
    res = out[0].permute(1, 2, 0).numpy()
    if squeeze:
        res = res[..., 0]
    if isinstance(image, Image):
        return Image(np.clip(res, 0.0, 1.0))
    return res


# ---------------------------------------------------------------------------
# Differentiable loss path (torch)
# ---------------------------------------------------------------------------

def _coords_tensor(h: int, w: int, dtype, device) -> torch.Tensor:
    return torch.from_numpy(make_coordinate_map(h, w).coords.reshape(-1, 2)).to(dtype=dtype, device=device)


def _as_bchw(image, dtype) -> torch.Tensor:
    if isinstance(image, Image):
        image = image.pixels
    if isinstance(image, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(image))
        if t.ndim == 3:
            t = t.permute(2, 0, 1)[None]
        elif t.ndim == 2:
            t = t[None, None]
        return t.to(dtype)
    if image.ndim == 3:
        image = image[None]
    return image.to(dtype)


def _as_batched_map(attn) -> torch.Tensor:
    if isinstance(attn, np.ndarray):
        attn = torch.from_numpy(np.ascontiguousarray(attn))
    if attn.ndim == 2:
        attn = attn[None]
    return attn


def leffa_loss(attn_maps: Dict[str, object], isolated, garment, cfg: LeffaConfig,
               shapes: Optional[Dict[str, Tuple[int, int]]] = None):
    """Sum over cfg.layer_ids of mean-per-pixel squared error after flow warping.

    ``attn_maps[layer]`` is (n_q, n_k) or (b, n_q, n_k) and row-stochastic;
    ``shapes[layer]`` gives the layer's token grid (h, w) when it cannot be
    inferred as square. Differentiable when given torch tensors. Layers are
    accumulated in sorted order, so the value is independent of the order
    the layer set is supplied in.
    """
    missing = [lid for lid in cfg.layer_ids if lid not in attn_maps]
    if missing:
        raise ValueError(f"attention maps missing for layers {missing}")
    ref = _as_batched_map(attn_maps[cfg.layer_ids[0]])
    dtype = ref.dtype if ref.is_floating_point() else torch.float64
    iso_t = _as_bchw(isolated, dtype)
    gt_t = _as_bchw(garment, dtype)
    out_hw = (gt_t.shape[2], gt_t.shape[3])

    total = None
    for lid in sorted(cfg.layer_ids):
        a = _as_batched_map(attn_maps[lid]).to(dtype)
        if shapes is not None and lid in shapes:
            kh, kw = shapes[lid]
        else:
            side = math.isqrt(a.shape[2])
            if side * side != a.shape[2]:
                raise ValueError(f"layer {lid}: cannot infer key grid shape; pass shapes")
            kh = kw = side
        if a.shape[1] != kh * kw:
            qh = a.shape[1] // kw if a.shape[1] % kw == 0 else None
            if qh is None:
                raise ValueError(f"layer {lid}: query count {a.shape[1]} incompatible with grid")
        else:
            qh = kh
        qw = a.shape[1] // qh
        coords = _coords_tensor(kh, kw, dtype, a.device)
        flow = (a @ coords).view(a.shape[0], qh, qw, 2)
        flow_img = F.interpolate(flow.permute(0, 3, 1, 2), size=out_hw,
                                 mode="bilinear", align_corners=True).permute(0, 2, 3, 1)
        warped = F.grid_sample(iso_t.expand(a.shape[0], -1, -1, -1), flow_img,
                               mode="bilinear", padding_mode="border", align_corners=True)
        term = ((warped - gt_t) ** 2).mean()
        total = term if total is None else total + term
    if isinstance(attn_maps[cfg.layer_ids[0]], np.ndarray):
        return float(total)
    return total


# ---------------------------------------------------------------------------
# Trainable attention adapter (training only)
# ---------------------------------------------------------------------------

def _module_key(layer_id: str) -> str:
    return layer_id.replace(".", "__")


class LeffaAdapter(nn.Module):
    """Dedicated Q/K projections producing one row-stochastic map per layer.

    The key projection is zero-initialized, so maps start uniform (softmax of
    all-zero logits). Heads are softmaxed independently and averaged.
    """

    def __init__(self, cfg: LeffaConfig, layer_channels: Dict[str, int]):
        super().__init__()
        missing = [lid for lid in cfg.layer_ids if lid not in layer_channels]
        if missing:
            raise ValueError(f"no channel info for layers {missing}")
        self.cfg = cfg
        self.layer_channels = {lid: layer_channels[lid] for lid in cfg.layer_ids}
        inner = cfg.heads * cfg.head_dim
        self.q_projs = nn.ModuleDict()
        self.k_projs = nn.ModuleDict()
        for lid in cfg.layer_ids:
            c = layer_channels[lid]
            self.q_projs[_module_key(lid)] = nn.Linear(c, inner)
            k = nn.Linear(c, inner)
            nn.init.zeros_(k.weight)
            nn.init.zeros_(k.bias)
            self.k_projs[_module_key(lid)] = k

    def forward(self, queries: Dict[str, torch.Tensor], keys: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        maps = {}
        h, d = self.cfg.heads, self.cfg.head_dim
        for lid in self.cfg.layer_ids:
            if lid not in queries or lid not in keys:
                raise ValueError(f"missing features for layer {lid!r}")
            q = self.q_projs[_module_key(lid)](queries[lid])
            k = self.k_projs[_module_key(lid)](keys[lid])
            b, nq, _ = q.shape
            qh = q.view(b, nq, h, d).transpose(1, 2)
            kh = k.view(b, -1, h, d).transpose(1, 2)
            attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
            maps[lid] = attn.mean(dim=1)
        return maps

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.parameters())


def adapter_param_count(cfg: LeffaConfig, layer_channels: Dict[str, int]) -> int:
    """Closed form: per layer, Q and K each contribute c*heads*head_dim weights + heads*head_dim biases."""
    inner = cfg.heads * cfg.head_dim
    return sum(2 * (layer_channels[lid] * inner + inner) for lid in cfg.layer_ids)


def build_adapter(model, cfg: Optional[LeffaConfig] = None, **cfg_overrides) -> LeffaAdapter:
    """Adapter over the model's fusion layers (all of them by default)."""
    channels = model.fusion_channels()
    if cfg is None:
        cfg = LeffaConfig(layer_ids=tuple(channels.keys()), **cfg_overrides)
    unknown = set(cfg.layer_ids) - set(channels)
    if unknown:
        raise ValueError(f"layer ids not among fusion layers: {sorted(unknown)}")
    return LeffaAdapter(cfg, channels)


# ---------------------------------------------------------------------------
# Debug dump
# ---------------------------------------------------------------------------

def dump_attention_grid(attn_maps: Dict[str, np.ndarray], shapes: Dict[str, Tuple[int, int]], path) -> None:
    """Render per-layer mean attention and flow fields into one PNG grid."""
    from .ioutils import save_png

    tiles = []
    for lid in sorted(attn_maps.keys()):
        a = np.asarray(attn_maps[lid], dtype=np.float64)
        if a.ndim == 3:
            a = a.mean(axis=0)
        kh, kw = shapes[lid]
        heat = a.mean(axis=0).reshape(kh, kw)
        heat = (heat - heat.min()) / (heat.max() - heat.min() + 1e-12)
        flow = attention_to_flow(a / a.sum(axis=1, keepdims=True), make_coordinate_map(kh, kw)).flow
        rgb_heat = np.repeat(heat[..., None], 3, axis=2)
        rgb_flow = np.stack([(flow[..., 0] + 1) / 2, (flow[..., 1] + 1) / 2, np.zeros_like(flow[..., 0])], axis=-1)
        tiles.append(np.concatenate([rgb_heat, np.ones((kh, 1, 3)), rgb_flow], axis=1))
    width = max(t.shape[1] for t in tiles)
    rows = []
    for t in tiles:
        pad = np.ones((t.shape[0], width - t.shape[1], 3))
        rows.append(np.concatenate([t, pad], axis=1))
        rows.append(np.ones((1, width, 3)))
    save_png(path, np.concatenate(rows[:-1], axis=0))
