"""Pyramidal dense optical flow plus the 0-255 flow-map encodings.

The estimator fits a local quadratic model f(x) ~ x'Ax + b'x + c to both
frames via Gaussian-weighted least squares and solves for the per-pixel
displacement aligning them, coarse-to-fine over an image pyramid with
iterative warping.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imagecore
from .imagecore import gaussian_kernel, correlate_separable

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
DET_EPSILON = 1e-9
AUTO_MAG_PERCENTILE = 99.0
MIN_LEVEL_SIDE = 8


@dataclass(frozen=True)
class FlowParams:
    """Estimator configuration; defaults mirror widely used values."""

    levels: int = 3
    iterations: int = 3
    poly_radius: int = 3
    poly_sigma: float = 1.1
    win_radius: int = 6
    win_sigma: float = 2.4
    pyr_scale: float = 0.5

    def __post_init__(self) -> None:
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if self.poly_radius < 1 or self.win_radius < 1:
            raise ValueError("radii must be >= 1")
        if self.poly_sigma <= 0 or self.win_sigma <= 0:
            raise ValueError("sigmas must be positive")
        if self.pyr_scale != 0.5:
            raise ValueError("pyr_scale is fixed at 0.5")


@dataclass
class PolyExpansion:
    """Per-pixel quadratic-fit coefficients.

    ``a`` holds (a11, a12, a22) of the symmetric 2x2 matrix, ``b`` the
    linear term (bx, by), ``c`` the constant term.
    """

    a: np.ndarray  # (H, W, 3) float32
    b: np.ndarray  # (H, W, 2) float32
    c: np.ndarray  # (H, W) float32


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Standard luma combination of an (H, W, 3) image."""
    a = imagecore.as_image(img, channels=3)
    r, g, b = GRAY_WEIGHTS
    return (
        np.float32(r) * a[:, :, 0] + np.float32(g) * a[:, :, 1] + np.float32(b) * a[:, :, 2]
    )


def poly_expansion(gray: np.ndarray, poly_sigma: float, poly_radius: int) -> PolyExpansion:
    """Fit the basis {1, x, y, x^2, y^2, xy} around every pixel.

    The Gaussian-weighted normal equations share one constant 6x6 system
    matrix, so the fit reduces to six separable correlations followed by a
    fixed linear combination per pixel.
    """
    plane = np.asarray(gray, dtype=np.float32)
    if plane.ndim == 3 and plane.shape[2] == 1:
        plane = plane[:, :, 0]
    if plane.ndim != 2:
        raise ValueError(f"poly_expansion wants a single-channel image, got shape {plane.shape}")
    if poly_radius < 1:
        raise ValueError(f"poly_radius must be >= 1, got {poly_radius}")

    g = gaussian_kernel(poly_sigma, poly_radius).astype(np.float64)
    x = np.arange(-poly_radius, poly_radius + 1, dtype=np.float64)
    xg = (x * g).astype(np.float32)
    xxg = (x * x * g).astype(np.float32)
    g32 = g.astype(np.float32)

    # window moments (g sums to 1, weights separable)
    m2 = float(np.sum(g * x * x))
    m4 = float(np.sum(g * x * x * x * x))
    m22 = m2 * m2

    big_g = np.zeros((6, 6), dtype=np.float64)
    big_g[0, 0] = 1.0
    big_g[1, 1] = big_g[2, 2] = m2
    big_g[0, 3] = big_g[0, 4] = big_g[3, 0] = big_g[4, 0] = m2
    big_g[3, 3] = big_g[4, 4] = m4
    big_g[3, 4] = big_g[4, 3] = m22
    big_g[5, 5] = m22
    inv = np.linalg.inv(big_g)
    ig00, ig03, ig11, ig33, ig55 = inv[0, 0], inv[0, 3], inv[1, 1], inv[3, 3], inv[5, 5]

    ty0 = _corr_v(plane, g32)
    ty1 = _corr_v(plane, xg)  # y * g along rows
    ty2 = _corr_v(plane, xxg)
    h1 = _corr_h(ty0, g32)
    hx = _corr_h(ty0, xg)
    hy = _corr_h(ty1, g32)
    hxx = _corr_h(ty0, xxg)
    hyy = _corr_h(ty2, g32)
    hxy = _corr_h(ty1, xg)

    a = np.empty(plane.shape + (3,), dtype=np.float32)
    a[:, :, 0] = np.float32(ig03) * h1 + np.float32(ig33) * hxx
    a[:, :, 1] = np.float32(ig55) * hxy * np.float32(0.5)
    a[:, :, 2] = np.float32(ig03) * h1 + np.float32(ig33) * hyy
    b = np.empty(plane.shape + (2,), dtype=np.float32)
    b[:, :, 0] = np.float32(ig11) * hx
    b[:, :, 1] = np.float32(ig11) * hy
    c = np.float32(ig00) * h1 + np.float32(ig03) * (hxx + hyy)
    return PolyExpansion(a=a, b=b, c=c)


def _corr_h(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return imagecore._correlate1d(plane, kernel, axis=1)


def _corr_v(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return imagecore._correlate1d(plane, kernel, axis=0)


def flow_increment(
    exp1: PolyExpansion,
    exp2: PolyExpansion,
    prior: np.ndarray,
    win_sigma: float,
    win_radius: int,
) -> np.ndarray:
    """One displacement update from two polynomial expansions.

    ``exp2`` must come from frame 2 warped by ``prior``. Per pixel the
    averaged quadratic term and the linear-term difference define a 2x2
    system; the system is aggregated over a Gaussian window before solving
    so textureless pixels borrow constraints from their neighborhood.
    Pixels whose aggregated system stays near-singular keep the prior.
    """
    if exp1.a.shape != exp2.a.shape:
        raise ValueError(f"expansion shapes differ: {exp1.a.shape} vs {exp2.a.shape}")
    p = imagecore.as_flow(prior)
    if p.shape[:2] != exp1.a.shape[:2]:
        raise ValueError("prior flow dims do not match expansions")

    a11 = (exp1.a[:, :, 0] + exp2.a[:, :, 0]) * np.float32(0.5)
    a12 = (exp1.a[:, :, 1] + exp2.a[:, :, 1]) * np.float32(0.5)
    a22 = (exp1.a[:, :, 2] + exp2.a[:, :, 2]) * np.float32(0.5)
    db1 = np.float32(-0.5) * (exp2.b[:, :, 0] - exp1.b[:, :, 0]) + a11 * p[:, :, 0] + a12 * p[:, :, 1]
    db2 = np.float32(-0.5) * (exp2.b[:, :, 1] - exp1.b[:, :, 1]) + a12 * p[:, :, 0] + a22 * p[:, :, 1]

    # A is symmetric, so A'A and A'db expand into five per-pixel planes
    g11 = a11 * a11 + a12 * a12
    g12 = a12 * (a11 + a22)
    g22 = a12 * a12 + a22 * a22
    h1 = a11 * db1 + a12 * db2
    h2 = a12 * db1 + a22 * db2

    w = gaussian_kernel(win_sigma, win_radius)
    g11 = correlate_separable(g11, w, w)
    g12 = correlate_separable(g12, w, w)
    g22 = correlate_separable(g22, w, w)
    h1 = correlate_separable(h1, w, w)
    h2 = correlate_separable(h2, w, w)

    det = g11 * g22 - g12 * g12
    ok = det >= np.float32(DET_EPSILON)
    safe_det = np.where(ok, det, np.float32(1.0))
    u = (g22 * h1 - g12 * h2) / safe_det
    v = (g11 * h2 - g12 * h1) / safe_det

    out = np.empty_like(p)
    out[:, :, 0] = np.where(ok, u, p[:, :, 0])
    out[:, :, 1] = np.where(ok, v, p[:, :, 1])
    return out


def upsample_flow(flow: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear-resize a flow field to the next pyramid level, doubling values."""
    up = imagecore.upsample_bilinear(imagecore.as_flow(flow), out_h, out_w)
    return up * np.float32(2.0)


def farneback(frame1: np.ndarray, frame2: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Dense flow from frame1 to frame2 on single-channel inputs.

    Coarse-to-fine: the coarsest level starts from a zero prior, each finer
    level starts from the upsampled (value-doubled) previous estimate, and
    every level runs ``iterations`` rounds of warp / re-expand / solve.
    """
    params = params or FlowParams()
    f1 = _as_gray_plane(frame1)
    f2 = _as_gray_plane(frame2)
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    if min(f1.shape) < MIN_LEVEL_SIDE:
        raise ValueError(f"frames must be at least {MIN_LEVEL_SIDE}px per side, got {f1.shape}")

    pyr1 = [f1]
    pyr2 = [f2]
    for _ in range(params.levels - 1):
        nh = -(-pyr1[-1].shape[0] // 2)
        nw = -(-pyr1[-1].shape[1] // 2)
        if min(nh, nw) < MIN_LEVEL_SIDE:
            break
        pyr1.append(imagecore.downsample_half(pyr1[-1]))
        pyr2.append(imagecore.downsample_half(pyr2[-1]))

    flow = np.zeros(pyr1[-1].shape + (2,), dtype=np.float32)
    for level in range(len(pyr1) - 1, -1, -1):
        p1, p2 = pyr1[level], pyr2[level]
        if flow.shape[:2] != p1.shape:
            flow = upsample_flow(flow, p1.shape[0], p1.shape[1])
        exp1 = poly_expansion(p1, params.poly_sigma, params.poly_radius)
        for _ in range(params.iterations):
            warped = imagecore.warp_bilinear(p2, flow)
            exp2 = poly_expansion(warped, params.poly_sigma, params.poly_radius)
            flow = flow_increment(exp1, exp2, flow, params.win_sigma, params.win_radius)
    return flow


def _as_gray_plane(frame: np.ndarray) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise ValueError(f"expected single-channel frame, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# flow-map encodings (all emit 0-255 values)


def flow_magnitude(flow: np.ndarray) -> np.ndarray:
    f = imagecore.as_flow(flow)
    return np.hypot(f[:, :, 0], f[:, :, 1])


def resolve_max_mag(flow: np.ndarray, max_mag: float | None) -> float:
    """Explicit max_mag, or the 99th-percentile magnitude (1.0 when that is 0)."""
    if max_mag is not None:
        if max_mag <= 0:
            raise ValueError(f"max_mag must be positive, got {max_mag}")
        return float(max_mag)
    p = float(np.percentile(flow_magnitude(flow), AUTO_MAG_PERCENTILE))
    return p if p > 0 else 1.0


def make_colorwheel() -> np.ndarray:
    """The standard 55-entry hue wheel (segments RY, YG, GC, CB, BM, MR)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3), dtype=np.float64)
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_colorwheel(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Hue from direction, saturation from magnitude; zero flow is white.

    Returns an (H, W, 3) uint8 image.
    """
    f = imagecore.as_flow(flow)
    scale = resolve_max_mag(f, max_mag)
    u = f[:, :, 0].astype(np.float64)
    v = f[:, :, 1].astype(np.float64)
    rad = np.minimum(np.hypot(u, v) / scale, 1.0)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.intp)
    k1 = k0 + 1
    k1[k1 == ncols] = 0
    frac = fk - k0

    out = np.empty(f.shape[:2] + (3,), dtype=np.uint8)
    for ch in range(3):
        col0 = wheel[k0, ch] / 255.0
        col1 = wheel[k1, ch] / 255.0
        col = (1.0 - frac) * col0 + frac * col1
        col = 1.0 - rad * (1.0 - col)  # desaturate toward white at low magnitude
        out[:, :, ch] = imagecore.quantize_u8(255.0 * col)
    return out


def flow_to_magdir(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Channel 0: clamped magnitude; channel 1: direction, with
    atan2(v, u) mapped from (-pi, pi] onto (0, 255]. Returns (H, W, 2) uint8."""
    f = imagecore.as_flow(flow)
    scale = resolve_max_mag(f, max_mag)
    mag = np.minimum(flow_magnitude(f) / scale, 1.0)
    direction = (np.arctan2(f[:, :, 1], f[:, :, 0]) + np.pi) / (2.0 * np.pi)
    out = np.empty(f.shape[:2] + (2,), dtype=np.uint8)
    out[:, :, 0] = imagecore.quantize_u8(255.0 * mag)
    out[:, :, 1] = imagecore.quantize_u8(255.0 * direction)
    return out


def flow_to_mag(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Magnitude-only encoding; returns (H, W, 1) uint8."""
    f = imagecore.as_flow(flow)
    scale = resolve_max_mag(f, max_mag)
    mag = np.minimum(flow_magnitude(f) / scale, 1.0)
    return imagecore.quantize_u8(255.0 * mag)[:, :, None]
