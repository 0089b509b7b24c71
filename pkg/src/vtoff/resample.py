"""Bilinear resampling helpers shared across the project.

One sampling convention is used everywhere (also by the torch grid-sampling
path in :mod:`vtoff.leffa`): corner-aligned. Output pixel i of an n-sized axis
samples the source at ``i * (n_src - 1) / (n_out - 1)``, so the first/last
samples land exactly on the first/last source pixels. Degenerate axes
(``n_out == 1`` or ``n_src == 1``) sample index 0.
"""

from __future__ import annotations

import numpy as np


def _axis_coords(n_out: int, n_src: int) -> np.ndarray:
    if n_out == 1 or n_src == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * (n_src - 1) / (n_out - 1)


def bilinear_sample(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``arr`` (H x W or H x W x C) at fractional pixel coords, border-clamped.

    ``ys``/``xs`` are broadcastable arrays of row/column positions; the output
    has their broadcast shape (plus the channel axis if present).
    """
    h, w = arr.shape[:2]
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = arr[y0, x0] * (1.0 - wx) + arr[y0, x1] * wx
    bot = arr[y1, x0] * (1.0 - wx) + arr[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an H x W or H x W x C array."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    if arr.shape[0] == out_h and arr.shape[1] == out_w:
        return arr.astype(np.float64, copy=True)
    ys = _axis_coords(out_h, arr.shape[0])[:, None]
    xs = _axis_coords(out_w, arr.shape[1])[None, :]
    return bilinear_sample(arr, np.broadcast_to(ys, (out_h, out_w)), np.broadcast_to(xs, (out_h, out_w)))
