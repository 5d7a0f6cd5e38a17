"""Raster primitives shared by the whole pipeline.

Array conventions:

* multi-channel image: ``(H, W, C)`` float32, channel-interleaved
* label map: ``(H, W)`` uint8, values in ``[0, K)`` plus ``IGNORE_LABEL``
* flow field: ``(H, W, 2)`` float32; ``[..., 0]`` is u (right), ``[..., 1]``
  is v (down), displacement from frame t to frame t+1 in pixels

Border policy for every filtering/sampling operation is edge replication.
Pixel math is float32 throughout; files store 8-bit for images and
float32 little-endian for flow.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255
MAX_SIDE = 16384
PYRAMID_SIGMA = 0.8
FLO_MAGIC = 202021.25

_WHITESPACE = b" \t\r\n"


class FormatError(ValueError):
    """An on-disk file does not match its expected byte format."""


def as_image(arr: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Validate and return ``arr`` as an (H, W, C) float32 image."""
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D image array, got ndim={a.ndim}")
    h, w, c = a.shape
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"degenerate image shape {a.shape}")
    if max(h, w) > MAX_SIDE:
        raise ValueError(f"image side exceeds {MAX_SIDE}")
    if channels is not None and c != channels:
        raise ValueError(f"expected {channels} channels, got {c}")
    return np.ascontiguousarray(a, dtype=np.float32)


def as_flow(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow array, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


def quantize_u8(x: np.ndarray) -> np.ndarray:
    """Round-half-up to uint8 after clipping to [0, 255]."""
    clipped = np.clip(np.asarray(x, dtype=np.float32), 0.0, 255.0)
    return np.floor(clipped + 0.5).astype(np.uint8)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian sampled on [-radius, radius]."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def _correlate1d(plane: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate a 2-D plane along one axis with replicate borders."""
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(plane, pad, mode="edge")
    out = np.zeros(plane.shape, dtype=np.float32)
    h, w = plane.shape
    for t in range(len(kernel)):
        if axis == 0:
            out += np.float32(kernel[t]) * padded[t : t + h, :]
        else:
            out += np.float32(kernel[t]) * padded[:, t : t + w]
    return out


def correlate_separable(
    plane: np.ndarray, kernel_x: np.ndarray, kernel_y: np.ndarray
) -> np.ndarray:
    """Correlate a single 2-D plane horizontally with kernel_x then
    vertically with kernel_y (both replicate-border)."""
    out = _correlate1d(np.asarray(plane, dtype=np.float32), kernel_x, axis=1)
    return _correlate1d(out, kernel_y, axis=0)


def separable_convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Apply a 1-D kernel horizontally then vertically to every channel.

    Correlation orientation (no kernel flip); border handling replicates the
    edge pixel. Output has the input's shape.
    """
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 1 or len(kernel) % 2 == 0:
        raise ValueError(f"kernel must be 1-D with odd length, got shape {kernel.shape}")
    a = as_image(img)
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        out[:, :, c] = correlate_separable(a[:, :, c], kernel, kernel)
    return out if np.asarray(img).ndim == 3 else out[:, :, 0]


def downsample_half(img: np.ndarray) -> np.ndarray:
    """Gaussian anti-alias blur then 2x subsample; output dims = ceil(dim/2)."""
    a = as_image(img)
    if a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"cannot downsample {a.shape[0]}x{a.shape[1]} image")
    blurred = separable_convolve(a, gaussian_kernel(PYRAMID_SIGMA, 2))
    out = blurred[::2, ::2, :]
    return out if np.asarray(img).ndim == 3 else out[:, :, 0]


def warp_bilinear(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``img`` at (x + u, y + v) with bilinear interpolation.

    Out-of-bounds sample coordinates clamp to the border. Integer-valued
    flow reproduces shifted pixels exactly.
    """
    squeeze = np.asarray(img).ndim == 2
    a = as_image(img)
    f = as_flow(flow)
    h, w = a.shape[:2]
    if f.shape[:2] != (h, w):
        raise ValueError(f"image {a.shape[:2]} and flow {f.shape[:2]} dims differ")

    xs = np.arange(w, dtype=np.float32)[None, :] + f[:, :, 0]
    ys = np.arange(h, dtype=np.float32)[:, None] + f[:, :, 1]
    xs = np.clip(xs, 0.0, np.float32(w - 1))
    ys = np.clip(ys, 0.0, np.float32(h - 1))

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0.astype(np.float32))[:, :, None]
    fy = (ys - y0.astype(np.float32))[:, :, None]

    top = a[y0, x0] * (1.0 - fx) + a[y0, x1] * fx
    bottom = a[y1, x0] * (1.0 - fx) + a[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    return out[:, :, 0] if squeeze else out


def upsample_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize using the pixel-center mapping
    src = (dst + 0.5) * (src_dim / dst_dim) - 0.5, clamped to the border."""
    squeeze = np.asarray(img).ndim == 2
    a = as_image(img)
    h, w = a.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be positive")

    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, np.float32(h - 1))
    xs = np.clip(xs, 0.0, np.float32(w - 1))

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0.astype(np.float32))[:, None, None]
    fx = (xs - x0.astype(np.float32))[None, :, None]

    top = a[y0[:, None], x0[None, :]] * (1.0 - fx) + a[y0[:, None], x1[None, :]] * fx
    bottom = a[y1[:, None], x0[None, :]] * (1.0 - fx) + a[y1[:, None], x1[None, :]] * fx
    out = top * (1.0 - fy) + bottom * fy
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# file formats


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n and data[pos : pos + 1] in _WHITESPACE:
        pos += 1
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise FormatError("truncated header")
    return data[start:pos], pos


def _read_pnm(path: str | Path, magic: bytes) -> tuple[int, int, bytes]:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"bad magic in {path!s}: expected {magic!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise FormatError(f"non-numeric header field {tok!r}") from exc
    w, h, maxval = fields
    if w < 1 or h < 1 or max(w, h) > MAX_SIDE:
        raise FormatError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    nbytes = w * h * (3 if magic == b"P6" else 1)
    payload = data[pos : pos + nbytes]
    if len(payload) != nbytes:
        raise FormatError(f"truncated payload: want {nbytes} bytes, have {len(payload)}")
    if pos + nbytes != len(data):
        raise FormatError("trailing bytes after payload")
    return w, h, payload


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    w, h, payload = _read_pnm(path, b"P6")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError(f"write_ppm wants (H, W, 3) uint8, got {a.shape} {a.dtype}")
    h, w = a.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array (label map or gray image)."""
    w, h, payload = _read_pnm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValueError(f"write_pgm wants (H, W) uint8, got {a.shape} {a.dtype}")
    h, w = a.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    """Read a .flo file into an (H, W, 2) float32 flow field."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("truncated .flo header")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad .flo magic {magic!r}")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 1 or h < 1 or max(w, h) > MAX_SIDE:
        raise FormatError(f"bad .flo dimensions {w}x{h}")
    nbytes = w * h * 2 * 4
    payload = data[12 : 12 + nbytes]
    if len(payload) != nbytes:
        raise FormatError(f"truncated .flo payload: want {nbytes} bytes, have {len(payload)}")
    if 12 + nbytes != len(data):
        raise FormatError("trailing bytes after .flo payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def write_flo(path: str | Path, flow: np.ndarray) -> None:
    f = as_flow(flow)
    if not np.all(np.isfinite(f)):
        raise FormatError("flow contains non-finite values")
    h, w = f.shape[:2]
    header = struct.pack("<f", FLO_MAGIC) + struct.pack("<ii", w, h)
    Path(path).write_bytes(header + f.astype("<f4").tobytes())
