import numpy as np
import pytest

from voxfuse.camera import Camera
from voxfuse.grid import SparseVoxelGrid, morton_encode
from voxfuse.image import ImagePlane
from voxfuse.render import (
    RenderResult,
    raycast_mesh_depth,
    ray_voxel_interval,
    render,
    trace_ray,
)
from voxfuse.tsdf import TriangleMesh

from conftest import axis_camera, make_grid, random_disjoint_cells, single_voxel_grid


class TestRayVoxelInterval:
    def test_axis_ray_full_width(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        hit = ray_voxel_interval(vox.center - [5, 0, 0], [1, 0, 0], vox)
        assert hit is not None
        t0, t1 = hit
        assert t1 - t0 == pytest.approx(vox.size, rel=1e-12)

    def test_miss_returns_none(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        assert ray_voxel_interval(vox.center + [0, 5, 0], [1, 0, 0], vox) is None

    def test_main_diagonal(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        d = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        origin = vox.lo - d  # on the diagonal, outside
        hit = ray_voxel_interval(origin, d, vox)
        assert hit is not None
        t0, t1 = hit
        assert t1 - t0 == pytest.approx(vox.size * np.sqrt(3.0), rel=1e-12)

    def test_behind_origin_is_none(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        assert ray_voxel_interval(vox.center + [5, 0, 0], [1, 0, 0], vox) is None


def opaque_voxel_scene(distance=2.0, level=1):
    """Single near-opaque voxel with its center `distance` from the camera."""
    grid = single_voxel_grid(level=level, density=1e4)
    vox = grid.voxel(morton_encode(0, 0, 0, level))
    eye = vox.center - np.array([distance, 0.0, 0.0])
    return grid, vox, eye


class TestRender:
    def test_empty_grid(self):
        grid = SparseVoxelGrid(np.zeros(3), 1.0)
        res = render(grid, axis_camera())
        assert np.all(res.alpha.values == 0.0)
        assert not res.depth.valid.any()

    @pytest.mark.parametrize("size", [9, 33])
    def test_single_opaque_voxel_depth(self, size):
        grid, vox, eye = opaque_voxel_scene(distance=2.0)
        cam = Camera.look_at(
            40.0, 40.0, size / 2.0, size / 2.0, size, size, eye, vox.center
        )
        res = render(grid, cam)
        cy, cx = size // 2, size // 2
        assert res.alpha.values[cy, cx] == pytest.approx(1.0, abs=1e-6)
        assert res.depth.valid[cy, cx]
        assert res.depth.values[cy, cx] == pytest.approx(
            2.0, abs=1e-3 * vox.size
        )

    def test_occluded_voxel_contributes_nothing(self):
        grid = make_grid([(0, 0, 0), (1, 0, 0)], 1, densities=1e5)
        colors = np.zeros((2, 1, 3), np.float32)
        colors[0, 0] = [1.0, 0.0, 0.0]
        colors[1, 0] = [0.0, 1.0, 0.0]
        grid._colors[:] = colors
        cam = axis_camera(eye=(-3.0, -0.5, -0.5), target=(0.5, -0.5, -0.5))
        o, d = cam.ray(cam.width // 2, cam.height // 2)
        tr = trace_ray(grid, o, d)
        assert len(tr.alpha) == 2
        assert tr.alpha[0] == pytest.approx(1.0, abs=1e-9)
        assert tr.transmittance[1] == pytest.approx(0.0, abs=1e-9)
        res = render(grid, cam)
        cy, cx = cam.height // 2, cam.width // 2
        assert res.color.values[cy, cx, 1] == pytest.approx(0.0, abs=1e-6)

    def test_matches_trace_oracle_per_pixel(self, rng):
        cells = random_disjoint_cells(rng, 40, 3)
        grid = make_grid(cells, 3, densities=0.0)
        grid._densities[:] = rng.uniform(0, 30, (40, 8)).astype(np.float32)
        grid._colors[:] = rng.uniform(0, 1, (40, 1, 3)).astype(np.float32)
        cam = axis_camera(width=24, height=24, eye=(-3.5, 0.8, 0.4),
                          target=(0.0, 0.0, 0.0))
        res = render(grid, cam, samples_per_interval=2)
        dirs = cam.pixel_rays().reshape(cam.height, cam.width, 3)
        colors = grid.evaluate_colors(
            (grid.centers() - cam.center) /
            np.linalg.norm(grid.centers() - cam.center, axis=1, keepdims=True)
        )
        for py in range(0, cam.height, 5):
            for px in range(0, cam.width, 5):
                tr = trace_ray(grid, cam.center, dirs[py, px], 2)
                w = tr.transmittance * tr.alpha
                alpha = w.sum()
                assert res.alpha.values[py, px] == pytest.approx(alpha, abs=1e-5)
                if alpha > 0:
                    depth = float((w * tr.z).sum() / alpha)
                    assert res.depth.values[py, px] == pytest.approx(
                        depth, abs=1e-4
                    ) or not res.depth.valid[py, px]
                    col = (w[:, None] * colors[tr.voxel_indices]).sum(axis=0)
                    assert np.allclose(res.color.values[py, px], col, atol=1e-5)

    def test_transmittance_properties_random_rays(self, rng):
        cells = random_disjoint_cells(rng, 60, 3)
        grid = make_grid(cells, 3, densities=0.0)
        grid._densities[:] = rng.uniform(0, 40, (60, 8)).astype(np.float32)
        for _ in range(200):
            origin = rng.uniform(-2.5, 2.5, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            tr = trace_ray(grid, origin, d)
            assert np.all(np.diff(tr.transmittance) <= 1e-12)
            assert float((tr.transmittance * tr.alpha).sum()) <= 1.0 + 1e-9

    def test_depth_convexity(self, rng):
        cells = random_disjoint_cells(rng, 30, 3)
        grid = make_grid(cells, 3, densities=0.0)
        grid._densities[:] = rng.uniform(0, 20, (30, 8)).astype(np.float32)
        cam = axis_camera(width=16, height=16, eye=(-3.0, 0.3, 0.2))
        res = render(grid, cam, alpha_valid_min=0.0)
        dirs = cam.pixel_rays().reshape(16, 16, 3)
        for py in range(16):
            for px in range(16):
                if res.alpha.values[py, px] <= 0:
                    continue
                tr = trace_ray(grid, cam.center, dirs[py, px])
                zs = tr.z[tr.alpha > 0]
                assert zs.min() - 1e-6 <= res.depth.values[py, px] <= zs.max() + 1e-6

    def test_thread_invariance_bit_exact(self, rng):
        cells = random_disjoint_cells(rng, 50, 3)
        grid = make_grid(cells, 3, densities=0.0)
        grid._densities[:] = rng.uniform(0, 30, (50, 8)).astype(np.float32)
        cam = axis_camera(width=40, height=40, eye=(-3.0, 0.5, 1.0))
        a = render(grid, cam, threads=1)
        b = render(grid, cam, threads=4)
        assert np.array_equal(a.color.values, b.color.values)
        assert np.array_equal(a.depth.values, b.depth.values)
        assert np.array_equal(a.alpha.values, b.alpha.values)
        assert np.array_equal(a.normal.values, b.normal.values)

    def test_normal_points_toward_camera_for_dense_wall(self):
        # densities rise along +x: the surface gradient points +x, normals -x
        grid = SparseVoxelGrid(np.array([-1.0, -1.0, -1.0]), 2.0)
        sig = np.zeros(8, np.float32)
        for j in range(8):
            sig[j] = 50.0 if (j & 1) else 0.0
        grid.insert(morton_encode(0, 0, 0, 1), sig)
        cam = axis_camera(eye=(-3.0, -0.5, -0.5), target=(0.0, -0.5, -0.5))
        res = render(grid, cam, alpha_valid_min=0.1)
        cy, cx = cam.height // 2, cam.width // 2
        assert res.normal.valid[cy, cx]
        assert res.normal.values[cy, cx, 0] < -0.9


def moller_trumbore_oracle(origin, d, v0, e1, e2):
    """All-triangles reference intersection, mirrored arithmetic."""
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), e2.shape)
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
    t = np.where(good, t, np.inf)
    return t.min()


def icosphere(radius, center, subdivisions=2):
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center)[None, :]
    return TriangleMesh(v, np.array(faces, dtype=np.int64))


class TestRaycastMeshDepth:
    def test_frontoparallel_triangle(self):
        cam = Camera.look_at(40, 40, 4.5, 4.5, 9, 9, (0, 0, 0), (1, 0, 0))
        mesh = TriangleMesh(
            np.array([[3.0, -2.0, -2.0], [3.0, 2.0, -2.0], [3.0, 0.0, 3.0]]),
            np.array([[0, 1, 2]]),
        )
        depth = raycast_mesh_depth(mesh, cam)
        assert depth.valid[4, 4]
        assert depth.values[4, 4] == pytest.approx(3.0, abs=1e-9)

    def test_miss_is_invalid(self):
        cam = Camera.look_at(40, 40, 4.5, 4.5, 9, 9, (0, 0, 0), (1, 0, 0))
        mesh = TriangleMesh(
            np.array([[3.0, 5.0, 5.0], [3.0, 6.0, 5.0], [3.0, 5.0, 6.0]]),
            np.array([[0, 1, 2]]),
        )
        depth = raycast_mesh_depth(mesh, cam)
        assert not depth.valid[4, 4]

    def test_icosphere_central_pixel(self):
        d, r = 4.0, 1.0
        cam = Camera.look_at(60, 60, 10.5, 10.5, 21, 21, (0, 0, 0), (1, 0, 0))
        mesh = icosphere(r, (d, 0.0, 0.0), subdivisions=2)
        depth = raycast_mesh_depth(mesh, cam)
        assert depth.valid[10, 10]
        assert depth.values[10, 10] == pytest.approx(d - r, abs=0.02 * r)

    def test_matches_brute_force_exactly(self, rng):
        cam = axis_camera(width=20, height=20, eye=(-3.0, 0.2, 0.1))
        verts = rng.uniform(-1.2, 1.2, (60, 3))
        tris = rng.integers(0, 60, (150, 3))
        tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                    & (tris[:, 0] != tris[:, 2])]
        mesh = TriangleMesh(verts, tris)
        depth = raycast_mesh_depth(mesh, cam)
        v0 = verts[mesh.triangles[:, 0]]
        e1 = verts[mesh.triangles[:, 1]] - v0
        e2 = verts[mesh.triangles[:, 2]] - v0
        dirs = cam.pixel_rays().reshape(20, 20, 3)
        for py in range(20):
            for px in range(20):
                t = moller_trumbore_oracle(cam.center, dirs[py, px], v0, e1, e2)
                if np.isinf(t):
                    assert not depth.valid[py, px]
                else:
                    assert depth.valid[py, px]
                    assert depth.values[py, px] == np.float32(t)

    def test_thread_invariance(self, rng):
        mesh = icosphere(1.0, (2.5, 0, 0), subdivisions=2)
        cam = axis_camera(width=30, height=30, eye=(0, 0, 0), target=(1, 0, 0))
        a = raycast_mesh_depth(mesh, cam, threads=1)
        b = raycast_mesh_depth(mesh, cam, threads=4)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.valid, b.valid)
