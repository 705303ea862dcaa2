"""Geometric consistency metrics between rendered and prior maps.

``patch_depth_loss`` standardizes depths per patch (subtract mean, divide
by population std floored at ``eps_std``) and averages the squared L2
distance between the standardized patches, which cancels any positive
affine scale/shift between the two maps. ``normal_loss`` is the mean of
``1 - dot`` over jointly valid unit normals.

Both are evaluation metrics only; nothing here feeds a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .image import ImagePlane, require_same_size


@dataclass
class PatchSpec:
    size: int = 8
    stride: int = 8
    eps_std: float = 1e-6

    def __post_init__(self):
        if self.size < 2:
            raise DomainError("patch size must be >= 2")
        if self.stride < 1:
            raise DomainError("patch stride must be >= 1")
        if self.eps_std <= 0:
            raise DomainError("eps_std must be positive")


def _patch_views(arr: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """(P, size*size) array of all patch contents; origin-major order."""
    h, w = arr.shape
    ys = range(0, h - spec.size + 1, spec.stride)
    xs = range(0, w - spec.size + 1, spec.stride)
    out = [arr[y : y + spec.size, x : x + spec.size].reshape(-1) for y in ys for x in xs]
    if not out:
        return np.zeros((0, spec.size * spec.size), dtype=arr.dtype)
    return np.stack(out)


def patch_depth_loss(d_ren: ImagePlane, d_prior: ImagePlane,
                     spec: PatchSpec | None = None) -> float:
    """Mean squared distance between per-patch standardized depths.

    A patch participates only when all of its pixels are valid in both
    maps; zero participating patches is an error.
    """
    spec = spec or PatchSpec()
    require_same_size(d_ren, d_prior, "depth maps")
    ren = _patch_views(d_ren.values.astype(np.float64), spec)
    pri = _patch_views(d_prior.values.astype(np.float64), spec)
    ok = (
        _patch_views(d_ren.valid.astype(np.float64), spec).all(axis=1)
        & _patch_views(d_prior.valid.astype(np.float64), spec).all(axis=1)
    )
    if not ok.any():
        raise DomainError("no patch has all pixels valid in both maps")
    ren, pri = ren[ok], pri[ok]

    def standardize(x):
        mu = x.mean(axis=1, keepdims=True)
        sigma = x.std(axis=1, keepdims=True)  # population std
        return (x - mu) / np.maximum(sigma, spec.eps_std)

    diff = standardize(ren) - standardize(pri)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def normal_loss(n_ren: ImagePlane, n_prior: ImagePlane) -> float:
    """Mean of (1 - dot) over jointly valid pixels of unit-normal maps."""
    require_same_size(n_ren, n_prior, "normal maps")
    ok = n_ren.valid & n_prior.valid
    if not ok.any():
        raise DomainError("no jointly valid pixel")
    a = n_ren.values.astype(np.float64)[ok]
    b = n_prior.values.astype(np.float64)[ok]
    return float(np.mean(1.0 - np.sum(a * b, axis=1)))
