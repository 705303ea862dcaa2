"""Full-resolution feature reconstruction from overlapping crops.

Crops are stitched by Gaussian-window blending: each crop contributes its
feature values weighted by a 2D Gaussian peaking at the crop center (the
anchor is the crop's top-left pixel in image coordinates, so the kernel
argument is crop-local). The blended map is then denoised by thresholded
cosine self-attention: token pairs whose cosine similarity is not above
the threshold are masked out, remaining weights are row-normalized and
applied to the raw (unnormalized) token features. The recursive variant
iterates this on the token lattice; the global variant runs one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError
from .image import ImagePlane


@dataclass
class CropFeature:
    anchor_x: int  # top-left pixel of the crop in full-image coordinates
    anchor_y: int
    feature: np.ndarray  # (h, w, D) float32, pre-upsampled to pixel footprint

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float32)
        if self.feature.ndim != 3:
            raise DomainError("crop feature must be (h, w, D)")
        if not np.all(np.isfinite(self.feature)):
            raise DomainError("crop feature values must be finite")

    @property
    def height(self) -> int:
        return self.feature.shape[0]

    @property
    def width(self) -> int:
        return self.feature.shape[1]


@dataclass
class AttentionConfig:
    cos_threshold: float = 0.0
    iterations: int = 2
    token_stride: int = 4

    def __post_init__(self):
        if not (-1.0 <= self.cos_threshold < 1.0):
            raise DomainError("cos_threshold must lie in [-1, 1)")
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if self.token_stride < 1:
            raise DomainError("token_stride must be >= 1")


def gaussian_window_blend(crops: list[CropFeature], out_width: int, out_height: int,
                          sigma_g: float | None = None, eps: float = 1e-8) -> ImagePlane:
    """Blend overlapping crops with Gaussian weights peaking at crop centers.

    ``sigma_g`` defaults to a quarter of each crop's smaller extent. Every
    output pixel must be covered by at least one crop.
    """
    if not crops:
        raise DomainError("no crops to blend")
    d = crops[0].feature.shape[2]
    for c in crops:
        if c.feature.shape[2] != d:
            raise DomainError("crops disagree on feature dimension")
        if c.anchor_x < 0 or c.anchor_y < 0 or c.anchor_x + c.width > out_width \
                or c.anchor_y + c.height > out_height:
            raise DomainError("crop extends outside the output image")
    acc = np.zeros((out_height, out_width, d), dtype=np.float64)
    wsum = np.zeros((out_height, out_width), dtype=np.float64)
    covered = np.zeros((out_height, out_width), dtype=bool)
    for c in crops:
        h, w = c.height, c.width
        sig = sigma_g if sigma_g is not None else 0.25 * min(w, h)
        ys = np.arange(h, dtype=np.float64) - (h - 1) / 2.0
        xs = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
        g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sig * sig))
        sl = (slice(c.anchor_y, c.anchor_y + h), slice(c.anchor_x, c.anchor_x + w))
        acc[sl] += g[:, :, None] * c.feature.astype(np.float64)
        wsum[sl] += g
        covered[sl] = True
    if not covered.all():
        y, x = np.argwhere(~covered)[0]
        raise DomainError(f"pixel (x={x}, y={y}) not covered by any crop")
    out = acc / (wsum + eps)[:, :, None]
    return ImagePlane(out.astype(np.float32))


def _token_lattice(feat: ImagePlane, stride: int) -> tuple[np.ndarray, int, int]:
    vals = feat.values
    if vals.ndim != 3:
        raise DomainError("feature map must have channels")
    ht = (feat.height + stride - 1) // stride
    wt = (feat.width + stride - 1) // stride
    tokens = vals[::stride, ::stride, :].reshape(ht * wt, -1).astype(np.float64)
    return tokens, ht, wt


def _attention_pass(tokens: np.ndarray, cos_threshold: float) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=1)
    if np.any(norms == 0):
        raise DomainError("zero-vector token in attention pass")
    unit = tokens / norms[:, None]
    sim = unit @ unit.T
    weights = np.where(sim > cos_threshold, sim, 0.0)
    rowsum = weights.sum(axis=1)
    keep = rowsum > 0
    out = tokens.copy()
    if keep.any():
        out[keep] = (weights[keep] / rowsum[keep, None]) @ tokens
    return out


def _tokens_to_map(tokens: np.ndarray, ht: int, wt: int, stride: int,
                   height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of the token lattice back to pixel resolution."""
    lattice = tokens.reshape(ht, wt, -1)
    gy = np.minimum(np.arange(height, dtype=np.float64) / stride, ht - 1.0)
    gx = np.minimum(np.arange(width, dtype=np.float64) / stride, wt - 1.0)
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    y1 = np.minimum(y0 + 1, ht - 1)
    x1 = np.minimum(x0 + 1, wt - 1)
    fy = (gy - y0)[:, None, None]
    fx = (gx - x0)[None, :, None]
    v00 = lattice[y0][:, x0]
    v01 = lattice[y0][:, x1]
    v10 = lattice[y1][:, x0]
    v11 = lattice[y1][:, x1]
    return (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )


def scra(feat: ImagePlane, cfg: AttentionConfig) -> ImagePlane:
    """Recursive thresholded-cosine self-attention over the token lattice."""
    tokens, ht, wt = _token_lattice(feat, cfg.token_stride)
    for _ in range(cfg.iterations):
        tokens = _attention_pass(tokens, cfg.cos_threshold)
    out = _tokens_to_map(tokens, ht, wt, cfg.token_stride, feat.height, feat.width)
    return ImagePlane(out.astype(np.float32), feat.valid.copy())


def scga(feat: ImagePlane, cfg: AttentionConfig) -> ImagePlane:
    """Single global thresholded-cosine aggregation pass."""
    tokens, ht, wt = _token_lattice(feat, cfg.token_stride)
    tokens = _attention_pass(tokens, cfg.cos_threshold)
    out = _tokens_to_map(tokens, ht, wt, cfg.token_stride, feat.height, feat.width)
    return ImagePlane(out.astype(np.float32), feat.valid.copy())


# -- crop manifest ----------------------------------------------------------


def save_crop_manifest(path, crops: list[tuple[int, int, int, int, str]]):
    """Rows of: anchor_x anchor_y width height relative_path."""
    with open(path, "w") as f:
        for ax, ay, w, h, rel in crops:
            f.write(f"{ax} {ay} {w} {h} {rel}\n")


def load_crop_manifest(path) -> list[tuple[int, int, int, int, str]]:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{path}:{ln}: expected 'ax ay w h path'")
            try:
                ax, ay, w, h = (int(v) for v in parts[:4])
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: non-integer geometry") from exc
            rows.append((ax, ay, w, h, parts[4]))
    return rows


def make_crops(feat: ImagePlane, crop_size: int) -> list[CropFeature]:
    """Split a full map into square crops with 50% overlap covering the image."""
    if crop_size < 2:
        raise DomainError("crop_size must be >= 2")
    size = min(crop_size, feat.width, feat.height)
    stride = max(1, size // 2)
    vals = feat.values
    if vals.ndim == 2:
        vals = vals[:, :, None]
    xs = list(range(0, max(feat.width - size, 0) + 1, stride))
    ys = list(range(0, max(feat.height - size, 0) + 1, stride))
    if xs[-1] + size < feat.width:
        xs.append(feat.width - size)
    if ys[-1] + size < feat.height:
        ys.append(feat.height - size)
    return [
        CropFeature(x, y, vals[y : y + size, x : x + size, :].copy())
        for y in ys
        for x in xs
    ]
