"""Alpha-composited rendering of the sparse grid and mesh depth ray casting.

Per pixel, voxels are visited in front-to-back order; each intersected
voxel contributes opacity ``alpha = 1 - exp(-sigma_bar * delta)`` where
``sigma_bar`` averages ``samples_per_interval`` trilinear density samples
over the ray-voxel interval and ``delta`` is the interval length. Color,
per-voxel scalars, and normals accumulate as ``sum T_j alpha_j value_j``;
depth is the transmittance-weighted mean of voxel-center distances
(normalized by accumulated alpha so it stays inside the contributing
z-range). Pixels whose accumulated alpha falls below ``alpha_valid_min``
are invalid in the depth and normal maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import DomainError
from .grid import (
    SparseVoxelGrid,
    Voxel,
    front_to_back_order,
    trilinear_basis,
    trilinear_gradient,
)
from .image import ImagePlane
from .parallel import run_blocks

_ROW_BLOCK = 16
_TINY = 1e-30


def ray_voxel_interval(origin, direction, voxel: Voxel):
    """Slab intersection of a unit-direction ray with a voxel cube.

    Returns ``(t_in, t_out)`` with ``t_in <= t_out`` or ``None`` when the
    ray misses or the cube lies entirely behind the origin.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t_in, t_out = _slab_single(origin, direction, voxel.lo, voxel.hi)
    if t_out < t_in or t_out < 0.0:
        return None
    return float(t_in), float(t_out)


def _slab_single(origin, direction, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / direction
        t1 = (hi - origin) / direction
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # zero direction component: inside the slab -> no constraint, outside -> miss
    inside = (origin >= lo) & (origin <= hi)
    zero = direction == 0.0
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    return float(np.nanmax(tmin)), float(np.nanmin(tmax))


def _slab_batch(origin, dirs, lo, hi):
    """Vectorized slab test: one origin, per-row dirs and boxes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin[None, :]) / dirs
        t1 = (hi - origin[None, :]) / dirs
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    zero = dirs == 0.0
    if zero.any():
        inside = (origin[None, :] >= lo) & (origin[None, :] <= hi)
        tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    else:
        nan = np.isnan(tmin)
        if nan.any():
            tmin = np.where(nan, -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
    return tmin.max(axis=1), tmax.min(axis=1)


@dataclass
class RayTrace:
    """Reference per-ray compositing trace (sequential; used as an oracle)."""

    voxel_indices: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray  # T before each contribution
    z: np.ndarray  # camera-center to voxel-center distance


def trace_ray(grid: SparseVoxelGrid, origin, direction,
              samples_per_interval: int = 1) -> RayTrace:
    """Sequential front-to-back walk of one ray. Plain reference path."""
    if samples_per_interval < 1:
        raise DomainError("samples_per_interval must be >= 1")
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)

    lo, hi = grid.aabbs()
    centers = grid.centers()
    sizes = grid.sizes()
    entry = np.maximum(
        _order_entry(grid, origin), 0.0
    )
    order = np.lexsort((grid.codes, grid.levels, entry))

    rows = []
    T = 1.0
    for i in order:
        t0, t1 = _slab_single(origin, direction, lo[i], hi[i])
        if t1 < t0 or t1 <= 0.0:
            continue
        t0 = max(t0, 0.0)
        delta = t1 - t0
        s = np.arange(samples_per_interval, dtype=np.float64)
        ts = t0 + (s + 0.5) / samples_per_interval * delta
        pts = origin[None, :] + ts[:, None] * direction[None, :]
        local = np.clip((pts - lo[i][None, :]) / sizes[i], 0.0, 1.0)
        sig = float(
            (trilinear_basis(local) @ grid.corner_densities[i].astype(np.float64)).mean()
        )
        alpha = 1.0 - np.exp(-sig * delta)
        z = float(np.linalg.norm(centers[i] - origin))
        rows.append((i, t0, t1, sig, alpha, T, z))
        T = T * (1.0 - alpha)
    if not rows:
        empty = np.zeros(0)
        return RayTrace(np.zeros(0, np.int64), empty, empty, empty, empty, empty, empty)
    arr = np.array([r[1:] for r in rows], dtype=np.float64)
    return RayTrace(
        np.array([r[0] for r in rows], dtype=np.int64),
        arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5],
    )


def _order_entry(grid: SparseVoxelGrid, origin: np.ndarray) -> np.ndarray:
    from .grid import ray_entry_distances

    return ray_entry_distances(grid, origin)


@dataclass
class RenderResult:
    color: ImagePlane
    depth: ImagePlane
    alpha: ImagePlane
    normal: ImagePlane


def render(grid: SparseVoxelGrid, camera: Camera, samples_per_interval: int = 1,
           alpha_valid_min: float = 0.5, threads: int = 1) -> RenderResult:
    """Render color/depth/alpha/normal maps from the grid."""
    if samples_per_interval < 1:
        raise DomainError("samples_per_interval must be >= 1")
    h, w = camera.height, camera.width
    if len(grid) == 0:
        return RenderResult(
            color=ImagePlane(np.zeros((h, w, 3), np.float32)),
            depth=ImagePlane.full_invalid(w, h),
            alpha=ImagePlane(np.zeros((h, w), np.float32)),
            normal=ImagePlane.full_invalid(w, h, 3),
        )
    dirs = grid.centers() - camera.center[None, :]
    n = np.linalg.norm(dirs, axis=1, keepdims=True)
    n = np.where(n == 0, 1.0, n)
    colors = grid.evaluate_colors(dirs / n)  # (N, 3)
    comp, alpha, depth, normal = _composite(
        grid, camera, colors, samples_per_interval, with_normal=True, threads=threads
    )
    ok = alpha >= alpha_valid_min
    return RenderResult(
        color=ImagePlane(comp.astype(np.float32)),
        depth=ImagePlane(np.where(ok, depth, 0.0).astype(np.float32), ok.copy()),
        alpha=ImagePlane(alpha.astype(np.float32)),
        normal=ImagePlane(
            np.where(ok[:, :, None], normal, 0.0).astype(np.float32), ok.copy()
        ),
    )


def composite_scalar(grid: SparseVoxelGrid, camera: Camera, values: np.ndarray,
                     samples_per_interval: int = 1, threads: int = 1) -> ImagePlane:
    """Alpha-composite one scalar per voxel exactly like color."""
    values = np.asarray(values, dtype=np.float64).reshape(len(grid), 1)
    comp, _, _, _ = _composite(
        grid, camera, values, samples_per_interval, with_normal=False, threads=threads
    )
    return ImagePlane(comp[:, :, 0].astype(np.float32))


def _voxel_pixel_bboxes(grid: SparseVoxelGrid, camera: Camera):
    """Conservative per-voxel pixel rects (x0, x1, y0, y1), end-exclusive.

    Voxels entirely behind the camera get empty rects; voxels straddling
    the camera plane cover the full image.
    """
    lo, hi = grid.aabbs()
    n = len(grid)
    corners = np.zeros((n, 8, 3))
    for j in range(8):
        corners[:, j, 0] = np.where(j & 1, hi[:, 0], lo[:, 0])
        corners[:, j, 1] = np.where(j & 2, hi[:, 1], lo[:, 1])
        corners[:, j, 2] = np.where(j & 4, hi[:, 2], lo[:, 2])
    uv, z = camera.project(corners.reshape(-1, 3))
    uv = uv.reshape(n, 8, 2)
    z = z.reshape(n, 8)
    behind = (z <= 1e-12).all(axis=1)
    straddle = (z <= 1e-12).any(axis=1) & ~behind

    x0 = np.floor(uv[:, :, 0].min(axis=1)).astype(np.int64) - 1
    x1 = np.ceil(uv[:, :, 0].max(axis=1)).astype(np.int64) + 1
    y0 = np.floor(uv[:, :, 1].min(axis=1)).astype(np.int64) - 1
    y1 = np.ceil(uv[:, :, 1].max(axis=1)).astype(np.int64) + 1
    x0 = np.clip(x0, 0, camera.width)
    x1 = np.clip(x1, 0, camera.width)
    y0 = np.clip(y0, 0, camera.height)
    y1 = np.clip(y1, 0, camera.height)
    x0[straddle] = 0
    x1[straddle] = camera.width
    y0[straddle] = 0
    y1[straddle] = camera.height
    x1[behind] = x0[behind]
    y1[behind] = y0[behind]
    return x0, x1, y0, y1


def _composite(grid: SparseVoxelGrid, camera: Camera, values: np.ndarray,
               samples: int, with_normal: bool, threads: int):
    """Shared compositor. values: (N, C) per-voxel channel data."""
    h, w = camera.height, camera.width
    values = np.asarray(values, dtype=np.float64)
    n_ch = values.shape[1]

    order = front_to_back_order(grid, camera)
    rank = np.empty(len(grid), dtype=np.int64)
    rank[order] = np.arange(len(grid))

    lo, hi = grid.aabbs()
    centers = grid.centers()
    sizes = grid.sizes()
    z_vox = np.linalg.norm(centers - camera.center[None, :], axis=1)
    x0, x1, y0, y1 = _voxel_pixel_bboxes(grid, camera)

    origin = camera.center
    cols_grid, rows_grid = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    all_dirs = camera.rays_for_pixels(
        cols_grid.ravel() + 0.5, rows_grid.ravel() + 0.5
    ).reshape(h, w, 3)

    comp = np.zeros((h, w, n_ch))
    alpha_map = np.zeros((h, w))
    depth_map = np.zeros((h, w))
    normal_map = np.zeros((h, w, 3))

    def do_rows(r0, r1):
        sel = np.nonzero((y0 < r1) & (y1 > r0) & (x1 > x0))[0]
        if sel.size == 0:
            return
        vy0 = np.maximum(y0[sel], r0)
        vy1 = np.minimum(y1[sel], r1)
        counts = (vy1 - vy0) * (x1[sel] - x0[sel])
        total = int(counts.sum())
        if total == 0:
            return
        pair_vox = np.repeat(sel, counts)
        # enumerate pixels inside each voxel's rect within this row block
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        widths = np.repeat(x1[sel] - x0[sel], counts)
        py = np.repeat(vy0, counts) + offs // widths
        px = np.repeat(x0[sel], counts) + offs % widths

        d = all_dirs[py, px]
        t0v, t1v = _slab_batch(origin, d, lo[pair_vox], hi[pair_vox])
        hit = (t1v >= t0v) & (t1v > 0.0)
        if not hit.any():
            return
        pair_vox = pair_vox[hit]
        px, py, d = px[hit], py[hit], d[hit]
        t0v = np.maximum(t0v[hit], 0.0)
        t1v = t1v[hit]
        delta = t1v - t0v

        corners = grid.corner_densities[pair_vox].astype(np.float64)
        size_p = sizes[pair_vox]
        lo_p = lo[pair_vox]
        sig = np.zeros(len(pair_vox))
        for s in range(samples):
            ts = t0v + (s + 0.5) / samples * delta
            pts = origin[None, :] + ts[:, None] * d
            local = np.clip((pts - lo_p) / size_p[:, None], 0.0, 1.0)
            sig += np.einsum("pj,pj->p", trilinear_basis(local), corners)
        sig /= samples
        alpha = -np.expm1(-sig * delta)

        pix = py * w + px
        idx = np.lexsort((rank[pair_vox], pix))
        pix, alpha = pix[idx], alpha[idx]
        pair_vox = pair_vox[idx]
        t0v, t1v, d = t0v[idx], t1v[idx], d[idx]
        corners, size_p, lo_p = corners[idx], size_p[idx], lo_p[idx]

        upix, starts, counts_px = np.unique(pix, return_index=True, return_counts=True)
        m = int(counts_px.max())
        local_row = np.repeat(np.arange(len(upix)), counts_px)
        local_col = np.arange(len(pix)) - np.repeat(starts, counts_px)
        one_minus = np.ones((len(upix), m))
        one_minus[local_row, local_col] = 1.0 - alpha
        T_padded = np.cumprod(one_minus, axis=1)
        T_excl = np.ones_like(T_padded)
        T_excl[:, 1:] = T_padded[:, :-1]
        weight = T_excl[local_row, local_col] * alpha

        ur = upix // w
        uc = upix % w
        for c in range(n_ch):
            acc = np.bincount(local_row, weights=weight * values[pair_vox, c],
                              minlength=len(upix))
            comp[ur, uc, c] += acc
        wsum = np.bincount(local_row, weights=weight, minlength=len(upix))
        alpha_map[ur, uc] += wsum
        zacc = np.bincount(local_row, weights=weight * z_vox[pair_vox],
                           minlength=len(upix))
        depth_map[ur, uc] += np.where(wsum > 0, zacc / np.maximum(wsum, _TINY), 0.0)

        if with_normal:
            tmid = 0.5 * (t0v + t1v)
            pts = origin[None, :] + tmid[:, None] * d
            local = np.clip((pts - lo_p) / size_p[:, None], 0.0, 1.0)
            g = trilinear_gradient(corners, local, size_p)
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            nrm = np.where(gn > 0, -g / np.maximum(gn, _TINY), 0.0)
            for c in range(3):
                acc = np.bincount(local_row, weights=weight * nrm[:, c],
                                  minlength=len(upix))
                normal_map[ur, uc, c] += acc

    run_blocks(do_rows, h, _ROW_BLOCK, threads)

    if with_normal:
        nn = np.linalg.norm(normal_map, axis=2, keepdims=True)
        normal_map = np.where(nn > 0, normal_map / np.maximum(nn, _TINY), 0.0)
    return comp, alpha_map, depth_map, normal_map


def raycast_mesh_depth(mesh, camera: Camera, threads: int = 1) -> ImagePlane:
    """Per-pixel nearest positive ray-triangle intersection distance.

    Moller-Trumbore against screen-binned candidate triangles; identical
    arithmetic to a brute-force all-triangles pass.
    """
    h, w = camera.height, camera.width
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    if not np.all(np.isfinite(verts)):
        raise DomainError("mesh vertices must be finite")
    depth = np.full((h, w), np.inf)
    if len(tris) == 0:
        return ImagePlane(np.zeros((h, w), np.float32), np.zeros((h, w), bool))

    uv, z = camera.project(verts)
    tz = z[tris]
    behind_all = (tz <= 1e-12).all(axis=1)
    straddle = (tz <= 1e-12).any(axis=1) & ~behind_all
    tu = uv[:, 0][tris]
    tv = uv[:, 1][tris]
    x0 = np.clip(np.floor(tu.min(axis=1)).astype(np.int64) - 1, 0, w)
    x1 = np.clip(np.ceil(tu.max(axis=1)).astype(np.int64) + 1, 0, w)
    y0 = np.clip(np.floor(tv.min(axis=1)).astype(np.int64) - 1, 0, h)
    y1 = np.clip(np.ceil(tv.max(axis=1)).astype(np.int64) + 1, 0, h)
    x0[straddle] = 0
    x1[straddle] = w
    y0[straddle] = 0
    y1[straddle] = h
    x1[behind_all] = x0[behind_all]
    y1[behind_all] = y0[behind_all]

    origin = camera.center
    v0 = verts[tris[:, 0]]
    e1 = verts[tris[:, 1]] - v0
    e2 = verts[tris[:, 2]] - v0

    cols_grid, rows_grid = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    all_dirs = camera.rays_for_pixels(
        cols_grid.ravel() + 0.5, rows_grid.ravel() + 0.5
    ).reshape(h, w, 3)

    def do_rows(r0, r1):
        selt = np.nonzero((y0 < r1) & (y1 > r0) & (x1 > x0))[0]
        if selt.size == 0:
            return
        ty0 = np.maximum(y0[selt], r0)
        ty1 = np.minimum(y1[selt], r1)
        counts = (ty1 - ty0) * (x1[selt] - x0[selt])
        total = int(counts.sum())
        if total == 0:
            return
        pair_tri = np.repeat(selt, counts)
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        widths = np.repeat(x1[selt] - x0[selt], counts)
        py = np.repeat(ty0, counts) + offs // widths
        px = np.repeat(x0[selt], counts) + offs % widths

        d = all_dirs[py, px]
        t = _moller_trumbore(origin, d, v0[pair_tri], e1[pair_tri], e2[pair_tri])
        ok = np.isfinite(t)
        if not ok.any():
            return
        flat = py[ok] * w + px[ok]
        np.minimum.at(depth.reshape(-1), flat, t[ok])

    run_blocks(do_rows, h, _ROW_BLOCK, threads)
    ok = np.isfinite(depth)
    return ImagePlane(np.where(ok, depth, 0.0).astype(np.float32), ok)


def _moller_trumbore(origin, d, v0, e1, e2):
    """Ray-triangle intersection parameter t, +inf on miss. Vectorized."""
    hvec = np.cross(d, e2)
    a = np.einsum("pj,pj->p", e1, hvec)
    inv = np.where(np.abs(a) > 1e-14, 1.0 / np.where(a == 0, 1.0, a), np.nan)
    s = origin[None, :] - v0
    u = inv * np.einsum("pj,pj->p", s, hvec)
    q = np.cross(s, e1)
    vpar = inv * np.einsum("pj,pj->p", d, q)
    t = inv * np.einsum("pj,pj->p", e2, q)
    good = (
        np.isfinite(u) & (u >= 0.0) & (u <= 1.0)
        & (vpar >= 0.0) & (u + vpar <= 1.0) & (t > 1e-12)
    )
    return np.where(good, t, np.inf)
