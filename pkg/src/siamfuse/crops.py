"""Crop geometry shared by inference and training-sample generation.

Frames are [H,W,3] float arrays in [0,1]; crops come out channel-first
[3,S,S] ready for the backbone. Template crops add half the box perimeter
as context; search crops scale that same window up by the configured
search/template ratio, so the target occupies the same fraction of both.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError


def context_side(w: float, h: float) -> float:
    """Side of the square context window around a w x h box."""
    if w <= 0 or h <= 0:
        raise ShapeError(f"box size must be positive, got {w}x{h}")
    pad = (w + h) / 2.0
    return math.sqrt((w + pad) * (h + pad))


def search_side(w: float, h: float, template_size: int, search_size: int) -> float:
    return context_side(w, h) * (search_size / template_size)


def crop_and_resize(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    """Bilinear crop of a square window to [3, out_size, out_size].

    Samples outside the frame read the per-channel frame mean (mean padding).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"frame must be [H,W,3], got {frame.shape}")
    if side <= 0 or out_size < 1:
        raise ShapeError(f"bad crop: side={side}, out_size={out_size}")
    h, w = frame.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    step = side / out_size
    xs = cx - side / 2.0 + (np.arange(out_size) + 0.5) * step - 0.5
    ys = cy - side / 2.0 + (np.arange(out_size) + 0.5) * step - 0.5

    pad = int(max(0.0, math.ceil(max(-xs.min(), -ys.min(), xs.max() - (w - 1), ys.max() - (h - 1), 0.0)))) + 1
    means = frame.mean(axis=(0, 1))
    padded = np.empty((h + 2 * pad, w + 2 * pad, 3))
    padded[:] = means[None, None, :]
    padded[pad : pad + h, pad : pad + w] = frame

    xs = xs + pad
    ys = ys + pad
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = x0 + 1
    y1 = y0 + 1

    tl = padded[y0[:, None], x0[None, :]]
    tr = padded[y0[:, None], x1[None, :]]
    bl = padded[y1[:, None], x0[None, :]]
    br = padded[y1[:, None], x1[None, :]]
    wx = fx[None, :, None]
    wy = fy[:, None, None]
    out = (
        tl * (1 - wx) * (1 - wy)
        + tr * wx * (1 - wy)
        + bl * (1 - wx) * wy
        + br * wx * wy
    )
    return out.transpose(2, 0, 1)


def template_crop(frame: np.ndarray, box_cxcywh: np.ndarray, template_size: int) -> np.ndarray:
    cx, cy, w, h = (float(v) for v in box_cxcywh)
    return crop_and_resize(frame, (cx, cy), context_side(w, h), template_size)


def search_crop(
    frame: np.ndarray,
    center: tuple[float, float],
    box_wh: tuple[float, float],
    template_size: int,
    search_size: int,
) -> tuple[np.ndarray, float]:
    """Crop the search window around ``center``; returns (crop, image pixels per crop pixel)."""
    side = search_side(box_wh[0], box_wh[1], template_size, search_size)
    return crop_and_resize(frame, center, side, search_size), side / search_size
