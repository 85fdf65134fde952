"""Raster images: PPM/PGM I/O, bicubic resizing and color conversion.

All resizing in the package goes through bicubic_resize (Keys kernel,
a = -0.5, edge-replicating). When downscaling, the kernel support is
stretched by the scale factor so the result is a filtered downsample
rather than an aliased point sample.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# ITU-R BT.601 full-range luma/chroma coefficients
_KR, _KG, _KB = 0.299, 0.587, 0.114


@dataclass
class RasterImage:
    """8-bit image, pixels shaped (height, width, channels), channels 1 or 3."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.size != self.width * self.height * self.channels:
            raise ValidationError(
                f"pixel count {px.size} != {self.width}x{self.height}x{self.channels}"
            )
        self.pixels = px.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RasterImage":
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, pixels=arr)

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64)

    def __eq__(self, other):
        return (isinstance(other, RasterImage)
                and self.width == other.width and self.height == other.height
                and self.channels == other.channels
                and np.array_equal(self.pixels, other.pixels))


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5), binary, maxval 255

def _read_header_tokens(f, n):
    tokens = []
    while len(tokens) < n:
        ch = f.read(1)
        if not ch:
            raise ValidationError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        tok = ch
        while True:
            ch = f.read(1)
            if not ch or ch.isspace():
                break
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = f.read(1)
                break
            tok += ch
        tokens.append(tok)
    return tokens


def read_ppm(path) -> RasterImage:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValidationError(f"{path}: unsupported magic {magic!r}, expected P6 or P5")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval != 255:
            raise ValidationError(f"{path}: unsupported maxval {maxval}")
        channels = 3 if magic == b"P6" else 1
        n = w * h * channels
        data = f.read(n)
        if len(data) != n:
            raise ValidationError(f"{path}: expected {n} pixel bytes, got {len(data)}")
    return RasterImage(width=w, height=h, channels=channels,
                       pixels=np.frombuffer(data, dtype=np.uint8).copy())


def write_ppm(path, img: RasterImage) -> None:
    magic = b"P6" if img.channels == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        f.write(np.ascontiguousarray(img.pixels).tobytes())


def read_ppm_dims(path) -> tuple[int, int]:
    """(width, height) from the header alone; does not decode pixel data."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P6", b"P5"):
            raise ValidationError(f"{path}: unsupported magic {magic!r}")
        w, h = (int(t) for t in _read_header_tokens(f, 2))
    return w, h


# ---------------------------------------------------------------------------
# bicubic resize

def _cubic(t: np.ndarray) -> np.ndarray:
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    return np.where(t <= 1.0, 1.5 * t3 - 2.5 * t2 + 1.0,
                    np.where(t < 2.0, -0.5 * t3 + 2.5 * t2 - 4.0 * t + 2.0, 0.0))


@functools.lru_cache(maxsize=256)
def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) row-stochastic bicubic sampling matrix."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    radius = 2.0 * support
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - radius + 1e-12)) + 1
        hi = int(np.floor(center + radius - 1e-12))
        idx = np.arange(lo, hi + 1)
        w = _cubic((center - idx) / support)
        np.add.at(mat[o], np.clip(idx, 0, n_in - 1), w)
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def bicubic_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H,W) or (H,W,C) float/uint8 data; returns float64, unclamped."""
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, _ = arr.shape
    wv = _resize_weights(h, out_h)
    wh = _resize_weights(w, out_w)
    tmp = np.tensordot(wv, arr.astype(np.float64), axes=(1, 0))  # (out_h, W, C)
    out = np.tensordot(tmp, wh, axes=(1, 1))                     # (out_h, C, out_w)
    out = np.ascontiguousarray(np.moveaxis(out, 1, 2))
    return out[:, :, 0] if squeeze else out


def resize_image(img: RasterImage, out_w: int, out_h: int) -> RasterImage:
    out = bicubic_resize(img.pixels, out_h, out_w)
    return RasterImage.from_array(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# color conversion (full-range BT.601)

def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8/float -> float64 YCbCr in [0,255]."""
    arr = rgb.astype(np.float64)
    r, g, b = arr[:, :, 0], arr[:, :, 1], arr[:, :, 2]
    y = _KR * r + _KG * g + _KB * b
    cb = 128.0 + (b - y) / (2.0 * (1.0 - _KB))
    cr = 128.0 + (r - y) / (2.0 * (1.0 - _KR))
    return np.stack([y, cb, cr], axis=2)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    """float YCbCr -> float64 RGB, unclamped."""
    y, cb, cr = ycc[:, :, 0], ycc[:, :, 1], ycc[:, :, 2]
    r = y + 2.0 * (1.0 - _KR) * (cr - 128.0)
    b = y + 2.0 * (1.0 - _KB) * (cb - 128.0)
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=2)


def luminance(img: RasterImage) -> np.ndarray:
    """Luma plane as float64 (H,W) in [0,255]."""
    if img.channels == 1:
        return img.pixels[:, :, 0].astype(np.float64)
    return rgb_to_ycbcr(img.pixels)[:, :, 0]
