"""RGB + flow-map fusion and per-pixel feature extraction.

Fused images stack the three RGB channels first, then the flow-encoding
channels, all on the 0-255 scale; standardization statistics come from the
source training split and are reused verbatim for the target split.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import imagecore


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # (C,) float64
    std: np.ndarray  # (C,) float64, zero replaced by 1

    @property
    def channels(self) -> int:
        return len(self.mean)


def concat_rgbf(rgb: np.ndarray, flowmap: np.ndarray) -> np.ndarray:
    """Stack RGB channels with 1/2/3 flow channels, values untouched."""
    a = imagecore.as_image(rgb, channels=3)
    f = imagecore.as_image(flowmap)
    if f.shape[2] not in (1, 2, 3):
        raise ValueError(f"flow map must have 1-3 channels, got {f.shape[2]}")
    if a.shape[:2] != f.shape[:2]:
        raise ValueError(f"rgb {a.shape[:2]} and flow map {f.shape[:2]} dims differ")
    return np.concatenate([a, f], axis=2)


def compute_stats(images: Sequence[np.ndarray]) -> ChannelStats:
    """Per-channel mean and population stddev over all pixels of all images."""
    if len(images) == 0:
        raise ValueError("compute_stats needs at least one image")
    channels = imagecore.as_image(images[0]).shape[2]
    total = 0
    s1 = np.zeros(channels, dtype=np.float64)
    s2 = np.zeros(channels, dtype=np.float64)
    for img in images:
        a = imagecore.as_image(img, channels=channels).astype(np.float64)
        s1 += a.sum(axis=(0, 1))
        s2 += (a * a).sum(axis=(0, 1))
        total += a.shape[0] * a.shape[1]
    mean = s1 / total
    var = np.maximum(s2 / total - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std == 0.0] = 1.0  # constant channels must not produce NaN
    return ChannelStats(mean=mean, std=std)


def standardize(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    a = imagecore.as_image(img)
    if a.shape[2] != stats.channels:
        raise ValueError(f"image has {a.shape[2]} channels, stats {stats.channels}")
    return ((a - stats.mean.astype(np.float32)) / stats.std.astype(np.float32)).astype(
        np.float32
    )


def destandardize(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    a = imagecore.as_image(img)
    if a.shape[2] != stats.channels:
        raise ValueError(f"image has {a.shape[2]} channels, stats {stats.channels}")
    return (a * stats.std.astype(np.float32) + stats.mean.astype(np.float32)).astype(
        np.float32
    )


def feature_length(channels: int, radius: int, include_position: bool = True) -> int:
    side = 2 * radius + 1
    return channels * side * side + (2 if include_position else 0)


def extract_features(
    img: np.ndarray, x: int, y: int, radius: int, include_position: bool = True
) -> np.ndarray:
    """Flattened (2r+1)^2 window at (x, y), channels innermost, window
    clamped at borders; optionally appends (x/W, y/H)."""
    a = imagecore.as_image(img)
    h, w = a.shape[:2]
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"pixel ({x}, {y}) outside {w}x{h} image")
    xs = np.clip(np.arange(x - radius, x + radius + 1), 0, w - 1)
    ys = np.clip(np.arange(y - radius, y + radius + 1), 0, h - 1)
    window = a[np.ix_(ys, xs)]
    feat = window.reshape(-1)
    if include_position:
        feat = np.concatenate([feat, np.float32([x / w, y / h])])
    return feat.astype(np.float32)


def build_feature_matrix(
    img: np.ndarray, radius: int, include_position: bool = True
) -> np.ndarray:
    """Feature vectors for every pixel, rows in row-major pixel order.

    Equivalent to calling extract_features per pixel; vectorized via shifted
    views of the edge-padded image.
    """
    a = imagecore.as_image(img)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    h, w, c = a.shape
    padded = np.pad(a, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    side = 2 * radius + 1
    planes = [
        padded[dy : dy + h, dx : dx + w, :] for dy in range(side) for dx in range(side)
    ]
    feats = np.concatenate(planes, axis=2).reshape(h * w, c * side * side)
    if include_position:
        xs = (np.arange(w, dtype=np.float32) / w)[None, :].repeat(h, axis=0).reshape(-1, 1)
        ys = (np.arange(h, dtype=np.float32) / h)[:, None].repeat(w, axis=1).reshape(-1, 1)
        feats = np.concatenate([feats, xs, ys], axis=1)
    return feats.astype(np.float32)
