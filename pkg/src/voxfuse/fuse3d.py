"""Confidence-weighted multi-view fusion of 2D features into voxels.

Per voxel i and visible view k the fused feature is

    F_i = sum_k w_ik * f_ik / (sum_k w_ik + eps)

with ``f_ik`` the bilinear sample of view k's feature map at the projected
voxel center and ``w_ik`` the product of a Gaussian spatial weight on the
gap between the voxel's center distance and the rendered depth, and a
per-pixel geometric confidence derived from the mesh-vs-rendered depth
discrepancy. Visibility requires the center to project inside the image
in front of the camera and to pass a mesh-depth occlusion test.

Voxels are processed in disjoint index batches; each batch streams the
views one at a time, so accumulator memory is O(batch_size * D)
regardless of grid or scene size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import DomainError
from .grid import SparseVoxelGrid, Voxel
from .image import ImagePlane, bilinear_sample, require_same_size
from .parallel import run_blocks


@dataclass
class ViewBundle:
    camera: Camera
    feature: ImagePlane  # (H, W, D)
    depth_ren: ImagePlane  # rendered from the grid
    depth_mesh: ImagePlane  # ray cast from the global mesh

    def __post_init__(self):
        for name, img in (("feature", self.feature), ("depth_ren", self.depth_ren),
                          ("depth_mesh", self.depth_mesh)):
            if (img.width, img.height) != (self.camera.width, self.camera.height):
                raise DomainError(f"{name} size does not match the camera")


@dataclass
class FusionConfig:
    beta: float  # spatial bandwidth, meters
    sigma_c: float  # confidence decay, meters
    eps: float = 1e-8
    occlusion_margin: float = 0.0  # meters
    batch_size: int = 4096

    def __post_init__(self):
        if self.beta <= 0 or self.sigma_c <= 0 or self.eps <= 0:
            raise DomainError("beta, sigma_c and eps must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")


def spatial_weight(z: float, d_ren: float, beta: float) -> float:
    """Gaussian proximity of the voxel-center distance to the rendered depth."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    if not np.isfinite(d_ren):
        return 0.0
    return float(np.exp(-((z - d_ren) ** 2) / (2.0 * beta * beta)))


def confidence_map(d_mesh: ImagePlane, d_ren: ImagePlane, sigma_c: float) -> ImagePlane:
    """Per-pixel exp(-|d_mesh - d_ren| / (2 sigma)); 0 where either is invalid."""
    if sigma_c <= 0:
        raise DomainError("sigma_c must be positive")
    require_same_size(d_mesh, d_ren, "depth maps")
    ok = d_mesh.valid & d_ren.valid
    diff = np.abs(d_mesh.values.astype(np.float64) - d_ren.values.astype(np.float64))
    conf = np.where(ok, np.exp(-diff / (2.0 * sigma_c)), 0.0)
    return ImagePlane(conf.astype(np.float32))


def _project_centers(camera: Camera, centers: np.ndarray):
    uv, zc = camera.project(centers)
    dist = np.linalg.norm(centers - camera.center[None, :], axis=1)
    inside = (
        (zc > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
        & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
    )
    return uv, dist, inside


def _visible_batch(centers: np.ndarray, view: ViewBundle, margin: float):
    """(visible, uv, dist) for a batch of voxel centers against one view."""
    uv, dist, inside = _project_centers(view.camera, centers)
    col = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, view.camera.width - 1)
    row = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, view.camera.height - 1)
    mesh_ok = view.depth_mesh.valid[row, col]
    ren_ok = view.depth_ren.valid[row, col]
    ref = np.where(
        mesh_ok,
        view.depth_mesh.values[row, col].astype(np.float64),
        view.depth_ren.values[row, col].astype(np.float64),
    )
    has_ref = mesh_ok | ren_ok
    visible = inside & has_ref & (dist <= ref + margin)
    return visible, uv, dist


def visible(voxel: Voxel, view: ViewBundle, margin: float) -> bool:
    """Front-of-camera, in-image, and not occluded behind the mesh surface."""
    vis, _, _ = _visible_batch(voxel.center[None, :], view, margin)
    return bool(vis[0])


@dataclass
class FuseStats:
    unfused_fraction: float
    mean_confidence: list[float] = field(default_factory=list)
    peak_accumulator_floats: int = 0


def fuse(grid: SparseVoxelGrid, views: list[ViewBundle], cfg: FusionConfig,
         threads: int = 1) -> FuseStats:
    """Populate grid features from all visible views; returns run statistics.

    Weights below use nearest-pixel depth/confidence lookups and bilinear
    feature sampling. Batches write disjoint voxel ranges, so the update
    is safe to run on a thread pool.
    """
    if len(grid) == 0:
        raise DomainError("grid has no voxels")
    if not views:
        raise DomainError("no views to fuse")
    d = views[0].feature.channels
    for v in views:
        if v.feature.channels != d:
            raise DomainError("views disagree on feature dimension")
    grid.allocate_features(d)
    centers = grid.centers()
    conf_maps = [
        confidence_map(v.depth_mesh, v.depth_ren, cfg.sigma_c) for v in views
    ]
    peak = 0

    def do_batch(b0, b1):
        nonlocal peak
        cb = centers[b0:b1]
        acc = np.zeros((b1 - b0, d), dtype=np.float64)
        wacc = np.zeros(b1 - b0, dtype=np.float64)
        peak = max(peak, acc.size + wacc.size)
        for view, conf in zip(views, conf_maps):
            vis, uv, dist = _visible_batch(cb, view, cfg.occlusion_margin)
            if not vis.any():
                continue
            u, v_ = uv[vis, 0], uv[vis, 1]
            col = np.clip(np.floor(u).astype(np.int64), 0, view.camera.width - 1)
            row = np.clip(np.floor(v_).astype(np.int64), 0, view.camera.height - 1)
            dren_ok = view.depth_ren.valid[row, col]
            dren = view.depth_ren.values[row, col].astype(np.float64)
            gap = dist[vis] - dren
            w_spatial = np.where(
                dren_ok, np.exp(-(gap * gap) / (2.0 * cfg.beta * cfg.beta)), 0.0
            )
            w = w_spatial * conf.values[row, col].astype(np.float64)
            feats = bilinear_sample(view.feature, u, v_)
            acc[vis] += w[:, None] * feats
            wacc[vis] += w
        fused = wacc > 0
        out = acc / (wacc[:, None] + cfg.eps)
        out[~fused] = 0.0
        grid.features[b0:b1] = out.astype(np.float32)
        grid.feature_weight_sum[b0:b1] = wacc.astype(np.float32)

    run_blocks(do_batch, len(grid), cfg.batch_size, threads)

    mean_conf = [float(c.values[c.values > 0].mean()) if (c.values > 0).any() else 0.0
                 for c in conf_maps]
    unfused = float(np.mean(grid.feature_weight_sum == 0))
    return FuseStats(
        unfused_fraction=unfused,
        mean_confidence=mean_conf,
        peak_accumulator_floats=int(peak),
    )
