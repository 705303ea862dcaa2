"""Image-plane raster with validity mask and its binary container.

``values`` is float32, (H, W) for scalar maps or (H, W, C) otherwise.
Invalid pixels hold the sentinel 0.0 and must be excluded from reductions.

Binary layout (.limg, little-endian): magic "LIMG", dtype tag u32 (1 =
float32), channels u32, width u32, height u32, then W*H*C float32 payload
row-major, then a validity bitmap of ceil(W*H/8) bytes (row-major pixels,
LSB first). Invalid pixels are written as 0.0 so round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError

IMG_MAGIC = b"LIMG"
DTYPE_F32 = 1


@dataclass
class ImagePlane:
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 3 and self.values.shape[2] == 1:
            self.values = self.values[:, :, 0]
        if self.values.ndim not in (2, 3):
            raise DomainError("values must be (H, W) or (H, W, C)")
        if self.valid is None:
            self.valid = np.ones(self.values.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape[:2]:
            raise DomainError("valid mask must match image size")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    @classmethod
    def full_invalid(cls, width: int, height: int, channels: int = 1) -> "ImagePlane":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(np.zeros(shape, np.float32), np.zeros((height, width), bool))

    def canonical(self) -> "ImagePlane":
        """Copy with sentinel 0.0 at invalid pixels."""
        v = self.values.copy()
        v[~self.valid] = 0.0
        return ImagePlane(v, self.valid.copy())

    def save(self, path):
        img = self.canonical()
        flat = img.values.reshape(self.height, self.width, self.channels)
        with open(path, "wb") as f:
            f.write(IMG_MAGIC)
            f.write(struct.pack("<IIII", DTYPE_F32, self.channels, self.width, self.height))
            f.write(flat.astype("<f4").tobytes())
            f.write(np.packbits(img.valid.ravel(), bitorder="little").tobytes())

    @classmethod
    def load(cls, path) -> "ImagePlane":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != IMG_MAGIC:
            raise DataError(f"{path}: bad magic, expected {IMG_MAGIC!r}")
        dtype, channels, width, height = struct.unpack_from("<IIII", data, 4)
        if dtype != DTYPE_F32:
            raise DataError(f"{path}: unknown dtype tag {dtype}")
        n = width * height * channels
        off = 20
        if len(data) < off + 4 * n + (width * height + 7) // 8:
            raise DataError(f"{path}: truncated payload")
        values = np.frombuffer(data, "<f4", n, off).reshape(height, width, channels).copy()
        off += 4 * n
        bits = np.frombuffer(data, np.uint8, (width * height + 7) // 8, off)
        valid = np.unpackbits(bits, count=width * height, bitorder="little")
        valid = valid.reshape(height, width).astype(bool)
        if channels == 1:
            values = values[:, :, 0]
        return cls(values, valid)

    def to_png(self, path, vmin: float | None = None, vmax: float | None = None):
        """Lossy 8-bit visualization; never read back."""
        from PIL import Image

        v = self.values.astype(np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        valid3 = np.repeat(self.valid[:, :, None], v.shape[2], axis=2)
        finite = v[valid3]
        lo = float(vmin) if vmin is not None else (finite.min() if finite.size else 0.0)
        hi = float(vmax) if vmax is not None else (finite.max() if finite.size else 1.0)
        if hi <= lo:
            hi = lo + 1.0
        scaled = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        scaled[~valid3] = 0.0
        arr = (scaled * 255.0 + 0.5).astype(np.uint8)
        if arr.shape[2] == 1:
            Image.fromarray(arr[:, :, 0], mode="L").save(path)
        elif arr.shape[2] == 3:
            Image.fromarray(arr, mode="RGB").save(path)
        else:
            Image.fromarray(arr[:, :, 0], mode="L").save(path)


def require_same_size(a: ImagePlane, b: ImagePlane, what: str = "maps"):
    if (a.width, a.height) != (b.width, b.height):
        raise DomainError(
            f"{what} size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def bilinear_sample(img: ImagePlane, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Clamped bilinear sample at continuous pixel coords; returns (N, C).

    Sampling grid is pixel centers; coordinates are clamped to the border.
    Validity is ignored here (callers gate on it separately).
    """
    vals = img.values
    if vals.ndim == 2:
        vals = vals[:, :, None]
    h, w = img.height, img.width
    gx = np.clip(np.asarray(u, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    gy = np.clip(np.asarray(v, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    v00 = vals[y0, x0].astype(np.float64)
    v01 = vals[y0, x1].astype(np.float64)
    v10 = vals[y1, x0].astype(np.float64)
    v11 = vals[y1, x1].astype(np.float64)
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def nearest_pixel(img: ImagePlane, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer (col, row) of the pixel containing continuous coords (u, v)."""
    col = np.clip(np.floor(np.asarray(u)).astype(np.int64), 0, img.width - 1)
    row = np.clip(np.floor(np.asarray(v)).astype(np.int64), 0, img.height - 1)
    return col, row
