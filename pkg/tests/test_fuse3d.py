import numpy as np
import pytest

from voxfuse.camera import Camera
from voxfuse.errors import DomainError
from voxfuse.fuse3d import (
    FusionConfig,
    ViewBundle,
    confidence_map,
    fuse,
    spatial_weight,
    visible,
)
from voxfuse.grid import morton_encode
from voxfuse.image import ImagePlane, bilinear_sample

from conftest import make_grid, random_disjoint_cells


class TestSpatialWeight:
    def test_on_surface_is_one(self):
        assert spatial_weight(2.0, 2.0, 0.5) == pytest.approx(1.0)

    def test_one_bandwidth_away(self):
        assert spatial_weight(2.5, 2.0, 0.5) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_formula_point(self):
        assert spatial_weight(3.0, 2.5, 0.25) == pytest.approx(np.exp(-2.0), rel=1e-12)

    def test_invalid_depth_is_zero(self):
        assert spatial_weight(3.0, float("nan"), 0.25) == 0.0


class TestConfidenceMap:
    def test_equal_depths_full_confidence(self):
        d = ImagePlane(np.full((4, 4), 2.0, np.float32))
        conf = confidence_map(d, d, 0.1)
        assert np.allclose(conf.values, 1.0)

    def test_two_sigma_gap(self):
        a = ImagePlane(np.full((2, 2), 2.0, np.float32))
        b = ImagePlane(np.full((2, 2), 2.0 + 2 * 0.1, np.float32))
        conf = confidence_map(a, b, 0.1)
        assert np.allclose(conf.values, np.exp(-1.0))

    def test_invalid_pixel_zero(self):
        a = ImagePlane(np.full((2, 2), 2.0, np.float32),
                       np.array([[True, False], [True, True]]))
        b = ImagePlane(np.full((2, 2), 2.0, np.float32))
        conf = confidence_map(a, b, 0.1)
        assert conf.values[0, 1] == 0.0
        assert conf.values[0, 0] == 1.0

    def test_size_mismatch(self):
        a = ImagePlane(np.zeros((2, 2), np.float32))
        b = ImagePlane(np.zeros((2, 3), np.float32))
        with pytest.raises(DomainError):
            confidence_map(a, b, 0.1)


def flat_view(cam, depth_value, feature=None, mesh_depth=None, dim=4):
    h, w = cam.height, cam.width
    if feature is None:
        feature = np.ones((h, w, dim), np.float32)
    depth_ren = ImagePlane(np.full((h, w), depth_value, np.float32))
    depth_mesh = ImagePlane(
        np.full((h, w), mesh_depth if mesh_depth is not None else depth_value,
                np.float32)
    )
    return ViewBundle(cam, ImagePlane(feature), depth_ren, depth_mesh)


def front_camera(width=16, height=16, eye=(-3.0, -0.5, -0.5)):
    return Camera.look_at(20.0, 20.0, width / 2, height / 2, width, height,
                          eye, (0.0, -0.5, -0.5))


class TestVisible:
    def test_behind_camera(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam = Camera.look_at(20, 20, 8, 8, 16, 16, vox.center + [2.0, 0, 0],
                             vox.center + [4.0, 0, 0])
        view = flat_view(cam, 5.0)
        assert not visible(vox, view, margin=0.1)

    def test_on_surface(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam = front_camera()
        dist = float(np.linalg.norm(vox.center - cam.center))
        view = flat_view(cam, dist)
        assert visible(vox, view, margin=0.0)

    def test_far_behind_mesh(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam = front_camera()
        dist = float(np.linalg.norm(vox.center - cam.center))
        margin = 0.05
        view = flat_view(cam, dist - 10 * margin)
        assert not visible(vox, view, margin=margin)

    def test_mesh_invalid_falls_back_to_rendered(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam = front_camera()
        dist = float(np.linalg.norm(vox.center - cam.center))
        h, w = cam.height, cam.width
        view = ViewBundle(
            cam,
            ImagePlane(np.ones((h, w, 4), np.float32)),
            ImagePlane(np.full((h, w), dist, np.float32)),
            ImagePlane(np.zeros((h, w), np.float32), np.zeros((h, w), bool)),
        )
        assert visible(vox, view, margin=0.0)
        both_invalid = ViewBundle(
            cam,
            ImagePlane(np.ones((h, w, 4), np.float32)),
            ImagePlane(np.zeros((h, w), np.float32), np.zeros((h, w), bool)),
            ImagePlane(np.zeros((h, w), np.float32), np.zeros((h, w), bool)),
        )
        assert not visible(vox, both_invalid, margin=0.0)


def fuse_oracle(grid, views, cfg):
    """Monolithic single-pass evaluation of the fusion formula."""
    centers = grid.centers()
    d = views[0].feature.channels
    acc = np.zeros((len(grid), d))
    wsum = np.zeros(len(grid))
    for view in views:
        conf = confidence_map(view.depth_mesh, view.depth_ren, cfg.sigma_c)
        for i in range(len(grid)):
            uv, zc = view.camera.project(centers[i][None, :])
            u, v = uv[0]
            if not (zc[0] > 0 and 0 <= u < view.camera.width
                    and 0 <= v < view.camera.height):
                continue
            col = min(int(np.floor(u)), view.camera.width - 1)
            row = min(int(np.floor(v)), view.camera.height - 1)
            dist = float(np.linalg.norm(centers[i] - view.camera.center))
            mesh_ok = view.depth_mesh.valid[row, col]
            ren_ok = view.depth_ren.valid[row, col]
            if mesh_ok:
                ref = float(view.depth_mesh.values[row, col])
            elif ren_ok:
                ref = float(view.depth_ren.values[row, col])
            else:
                continue
            if dist > ref + cfg.occlusion_margin:
                continue
            w_sp = (
                spatial_weight(dist, float(view.depth_ren.values[row, col]), cfg.beta)
                if ren_ok else 0.0
            )
            w = w_sp * float(conf.values[row, col])
            f = bilinear_sample(view.feature, np.array([u]), np.array([v]))[0]
            acc[i] += w * f
            wsum[i] += w
    out = acc / (wsum[:, None] + cfg.eps)
    out[wsum == 0] = 0.0
    return out, wsum


def random_scene(rng, n_vox=200, n_views=3, dim=5):
    cells = random_disjoint_cells(rng, n_vox, 4)
    grid = make_grid(cells, 4)
    views = []
    for k in range(n_views):
        ang = 2 * np.pi * k / n_views
        eye = (3.0 * np.cos(ang), 3.0 * np.sin(ang), 1.0)
        cam = Camera.look_at(18.0, 18.0, 8, 8, 16, 16, eye, (0, 0, 0))
        feat = rng.normal(size=(16, 16, dim)).astype(np.float32)
        dren = rng.uniform(2.0, 4.0, (16, 16)).astype(np.float32)
        dmesh = (dren + rng.normal(0, 0.05, (16, 16))).astype(np.float32)
        views.append(ViewBundle(cam, ImagePlane(feat), ImagePlane(dren),
                                ImagePlane(dmesh)))
    return grid, views


class TestFuse:
    def test_single_view_on_surface(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam = front_camera()
        dist = float(np.linalg.norm(vox.center - cam.center))
        feat = np.zeros((16, 16, 3), np.float32)
        feat[:, :] = [1.0, 2.0, 3.0]
        view = flat_view(cam, dist, feature=feat)
        cfg = FusionConfig(beta=0.5, sigma_c=0.1, eps=1e-8, occlusion_margin=0.1,
                           batch_size=8)
        fuse(grid, [view], cfg)
        expected = np.array([1.0, 2.0, 3.0]) / (1.0 + 1e-8)
        assert np.allclose(grid.features[0], expected, rtol=1e-6)
        assert grid.fused_mask[0]

    def test_two_equal_views_average(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        views = []
        feats = [np.array([2.0, 0.0]), np.array([0.0, 4.0])]
        for k, eye in enumerate([(-3.0, -0.5, -0.5), (2.0, -0.5, -0.5)]):
            cam = Camera.look_at(20.0, 20.0, 8, 8, 16, 16, eye, vox.center)
            dist = float(np.linalg.norm(vox.center - np.asarray(eye)))
            f = np.tile(feats[k].astype(np.float32), (16, 16, 1))
            views.append(flat_view(cam, dist, feature=f))
        cfg = FusionConfig(beta=0.5, sigma_c=0.1, eps=1e-8, batch_size=4)
        fuse(grid, views, cfg)
        # both views have w = 1: F = (f_a + f_b) / (2 + eps)
        expected = (feats[0] + feats[1]) / (2.0 + 1e-8)
        assert np.allclose(grid.features[0], expected, rtol=1e-6)

    @pytest.mark.parametrize("batch_size", [1, 7, 200])
    def test_batch_invariance_matches_oracle(self, rng, batch_size):
        grid, views = random_scene(rng)
        cfg = FusionConfig(beta=0.3, sigma_c=0.1, eps=1e-8, occlusion_margin=0.2,
                           batch_size=batch_size)
        stats = fuse(grid, views, cfg)
        expected, wsum = fuse_oracle(grid, views, cfg)
        fused = wsum > 0
        assert fused.any()
        scale = np.abs(expected[fused]).max()
        assert np.allclose(grid.features[fused], expected[fused],
                           rtol=1e-5, atol=1e-5 * scale)
        assert np.allclose(grid.feature_weight_sum, wsum, rtol=1e-5, atol=1e-7)
        assert stats.peak_accumulator_floats <= batch_size * (views[0].feature.channels + 1)

    def test_zero_confidence_view_equivalent_to_removal(self, rng):
        grid, views = random_scene(rng, n_views=3)
        # make one view's mesh depth invalid everywhere: confidence 0, and
        # occlusion falls back to rendered depth
        h, w = views[0].camera.height, views[0].camera.width
        dead = ViewBundle(
            views[0].camera, views[0].feature, views[0].depth_ren,
            ImagePlane(np.zeros((h, w), np.float32), np.zeros((h, w), bool)),
        )
        cfg = FusionConfig(beta=0.3, sigma_c=0.1, eps=1e-8, batch_size=64)
        fuse(grid, [dead] + views[1:], cfg)
        with_dead = grid.features.copy()
        fuse(grid, views[1:], cfg)
        assert np.allclose(with_dead, grid.features, atol=1e-7)

    def test_confidence_moves_feature_along_chord(self):
        # two views, one fixed; scaling the other's confidence from 0 to 1
        # moves the fused feature monotonically toward that view's sample
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        cam_a = front_camera()
        cam_b = Camera.look_at(20.0, 20.0, 8, 8, 16, 16, (2.0, -0.5, -0.5),
                               vox.center)
        dist_a = float(np.linalg.norm(vox.center - cam_a.center))
        dist_b = float(np.linalg.norm(vox.center - cam_b.center))
        f_a = np.tile(np.float32([1.0, 0.0]), (16, 16, 1))
        f_b = np.tile(np.float32([0.0, 1.0]), (16, 16, 1))
        cfg = FusionConfig(beta=0.5, sigma_c=0.1, eps=1e-8, batch_size=4)
        prev_gap = None
        target = np.array([0.0, 1.0])
        for conf_gap in (10.0, 0.2, 0.05, 0.0):  # mesh-vs-ren gap in meters
            va = flat_view(cam_a, dist_a, feature=f_a)
            vb = ViewBundle(
                cam_b, ImagePlane(f_b),
                ImagePlane(np.full((16, 16), dist_b, np.float32)),
                ImagePlane(np.full((16, 16), dist_b + conf_gap, np.float32)),
            )
            fuse(grid, [va, vb], cfg)
            gap = np.linalg.norm(grid.features[0] - target)
            if prev_gap is not None:
                assert gap <= prev_gap + 1e-9
            prev_gap = gap

    def test_unfused_voxels_flagged(self, rng):
        grid, views = random_scene(rng, n_vox=50)
        # push every voxel far behind the mesh: nothing is visible
        h, w = views[0].camera.height, views[0].camera.width
        near = [
            ViewBundle(v.camera, v.feature,
                       ImagePlane(np.full((h, w), 0.1, np.float32)),
                       ImagePlane(np.full((h, w), 0.1, np.float32)))
            for v in views
        ]
        cfg = FusionConfig(beta=0.3, sigma_c=0.1, eps=1e-8, occlusion_margin=0.0,
                           batch_size=16)
        stats = fuse(grid, near, cfg)
        assert stats.unfused_fraction == 1.0
        assert not grid.fused_mask.any()
        assert np.all(grid.features == 0.0)

    def test_norm_bounded_by_max_sample(self, rng):
        grid, views = random_scene(rng)
        cfg = FusionConfig(beta=0.3, sigma_c=0.1, eps=1e-8, batch_size=32)
        fuse(grid, views, cfg)
        max_sample = max(
            float(np.linalg.norm(v.feature.values.reshape(-1, 5), axis=1).max())
            for v in views
        )
        norms = np.linalg.norm(grid.features, axis=1)
        assert norms.max() <= max_sample + 1e-6

    def test_empty_views_rejected(self, rng):
        grid, _ = random_scene(rng, n_vox=10)
        cfg = FusionConfig(beta=0.3, sigma_c=0.1)
        with pytest.raises(DomainError):
            fuse(grid, [], cfg)
