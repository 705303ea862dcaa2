import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxfuse.errors import DomainError
from voxfuse.grid import (
    SparseVoxelGrid,
    VoxelKey,
    decode_codes,
    encode_cells,
    front_to_back_order,
    morton_decode,
    morton_encode,
    trilinear_basis,
    trilinear_density,
)

from conftest import axis_camera, make_grid, random_disjoint_cells


def interleave_oracle(ix, iy, iz, level):
    code = 0
    for b in range(level):
        code |= ((ix >> b) & 1) << (3 * b)
        code |= ((iy >> b) & 1) << (3 * b + 1)
        code |= ((iz >> b) & 1) << (3 * b + 2)
    return code


class TestMorton:
    def test_zero_cell_is_code_zero(self):
        for level in (0, 1, 5, 21):
            assert morton_encode(0, 0, 0, level).code == 0

    def test_unit_x_level1(self):
        assert morton_encode(1, 0, 0, 1).code == 1

    def test_round_trip_537(self):
        assert morton_decode(morton_encode(5, 3, 7, 3)) == (5, 3, 7)

    def test_exhaustive_small_levels(self):
        for level in (1, 2, 3, 4):
            side = 1 << level
            for ix, iy, iz in itertools.product(range(side), repeat=3):
                key = morton_encode(ix, iy, iz, level)
                assert key.code == interleave_oracle(ix, iy, iz, level)
                assert morton_decode(key) == (ix, iy, iz)

    @given(st.integers(5, 21), st.data())
    @settings(max_examples=200)
    def test_round_trip_random_large_levels(self, level, data):
        side = 1 << level
        ix = data.draw(st.integers(0, side - 1))
        iy = data.draw(st.integers(0, side - 1))
        iz = data.draw(st.integers(0, side - 1))
        key = morton_encode(ix, iy, iz, level)
        assert key.code == interleave_oracle(ix, iy, iz, level)
        assert morton_decode(key) == (ix, iy, iz)

    def test_vectorized_matches_scalar(self, rng):
        cells = rng.integers(0, 2**21, size=(512, 3))
        codes = encode_cells(cells, 21)
        for c, code in zip(cells[:16], codes[:16]):
            assert int(code) == interleave_oracle(*map(int, c), 21)
        assert np.array_equal(decode_codes(codes), cells)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            morton_encode(2, 0, 0, 1)
        with pytest.raises(DomainError):
            morton_encode(-1, 0, 0, 3)
        with pytest.raises(DomainError):
            morton_encode(0, 0, 0, 22)

    def test_key_invariants(self):
        with pytest.raises(DomainError):
            VoxelKey(1, 8)
        with pytest.raises(DomainError):
            VoxelKey(-1, 0)


class TestAntichain:
    def test_duplicate_rejected(self):
        grid = make_grid([(0, 0, 0)], 1)
        with pytest.raises(DomainError):
            grid.insert(morton_encode(0, 0, 0, 1), np.zeros(8))

    def test_descendant_rejected(self):
        grid = make_grid([(0, 0, 0)], 1)
        with pytest.raises(DomainError):
            grid.insert(morton_encode(0, 0, 0, 3), np.zeros(8))

    def test_ancestor_rejected(self):
        grid = make_grid([(0, 0, 0)], 3)
        with pytest.raises(DomainError):
            grid.insert(morton_encode(0, 0, 0, 1), np.zeros(8))

    def test_sibling_accepted(self):
        grid = make_grid([(0, 0, 0)], 2)
        grid.insert(morton_encode(1, 0, 0, 2), np.zeros(8))
        assert len(grid) == 2

    @given(st.integers(1, 5), st.integers(1, 5), st.data())
    @settings(max_examples=200)
    def test_random_pairs(self, la, lb, data):
        side_a, side_b = 1 << la, 1 << lb
        ca = tuple(data.draw(st.integers(0, side_a - 1)) for _ in range(3))
        cb = tuple(data.draw(st.integers(0, side_b - 1)) for _ in range(3))
        ka = morton_encode(*ca, la)
        kb = morton_encode(*cb, lb)
        grid = SparseVoxelGrid(np.zeros(3), 1.0)
        grid.insert(ka, np.zeros(8))
        related = False
        if la <= lb:
            related = kb.ancestor(la) == ka
        else:
            related = ka.ancestor(lb) == kb
        if related:
            with pytest.raises(DomainError):
                grid.insert(kb, np.zeros(8))
        else:
            grid.insert(kb, np.zeros(8))
            assert len(grid) == 2


class TestTrilinear:
    def test_constant_field(self, rng):
        grid = make_grid([(0, 0, 0)], 1, densities=3.25)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        for _ in range(20):
            p = vox.lo + rng.uniform(0, 1, 3) * vox.size
            assert trilinear_density(vox, p) == pytest.approx(3.25, abs=1e-12)

    def test_vertex_interpolation(self):
        grid = SparseVoxelGrid(np.zeros(3), 2.0)
        sig = np.arange(8, dtype=np.float32) + 1.0
        key = morton_encode(0, 0, 0, 1)
        grid.insert(key, sig)
        vox = grid.voxel(key)
        for j in range(8):
            offset = np.array([(j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1], float)
            p = vox.lo + offset * vox.size
            assert trilinear_density(vox, p) == pytest.approx(sig[j], abs=1e-12)

    def test_center_is_mean(self, rng):
        sig = rng.uniform(0, 5, 8).astype(np.float32)
        grid = SparseVoxelGrid(np.zeros(3), 2.0)
        key = morton_encode(0, 0, 0, 1)
        grid.insert(key, sig)
        vox = grid.voxel(key)
        assert trilinear_density(vox, vox.center) == pytest.approx(
            float(sig.astype(np.float64).mean()), rel=1e-12
        )

    def test_outside_cube_rejected(self):
        grid = make_grid([(0, 0, 0)], 1)
        vox = grid.voxel(morton_encode(0, 0, 0, 1))
        with pytest.raises(DomainError):
            trilinear_density(vox, vox.hi + 0.5)

    @given(st.integers(0, 7), st.floats(0.1, 5.0), st.data())
    @settings(max_examples=100)
    def test_affine_in_each_corner(self, j, lam, data):
        sig = np.array([data.draw(st.floats(0, 10)) for _ in range(8)], np.float64)
        local = np.array([[data.draw(st.floats(0, 1)) for _ in range(3)]])
        basis = trilinear_basis(local)[0]
        base = float(basis @ sig)
        bumped = sig.copy()
        bumped[j] += lam
        assert float(basis @ bumped) - base == pytest.approx(
            lam * basis[j], rel=1e-9, abs=1e-9
        )


def slab_entry_oracle(origin, center, lo, hi):
    """Independent per-voxel slab intersection of the origin->center ray."""
    d = center - origin
    d = d / np.linalg.norm(d)
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return np.inf
            continue
        ta = (lo[a] - origin[a]) / d[a]
        tb = (hi[a] - origin[a]) / d[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if t1 < t0:
        return np.inf
    return max(t0, 0.0)


class TestFrontToBackOrder:
    def test_two_stacked_voxels(self):
        grid = make_grid([(0, 0, 0), (1, 0, 0)], 1)
        cam = axis_camera(eye=(-3.0, -0.5, -0.5), target=(0.0, -0.5, -0.5))
        order = front_to_back_order(grid, cam)
        # the voxel at cell x=0 is nearer to the camera on the -x side
        cells = decode_codes(grid.codes[order])
        assert cells[0][0] == 0 and cells[1][0] == 1

    def test_singleton(self):
        grid = make_grid([(1, 1, 1)], 2)
        cam = axis_camera()
        assert front_to_back_order(grid, cam).tolist() == [0]

    def test_empty(self):
        grid = SparseVoxelGrid(np.zeros(3), 1.0)
        assert front_to_back_order(grid, axis_camera()).size == 0

    def test_matches_exhaustive_slab_oracle(self, rng):
        cells = random_disjoint_cells(rng, 64, 4)
        grid = make_grid(cells, 4)
        cam = axis_camera(eye=(-4.0, 1.3, 2.2), target=(0.0, 0.0, 0.0))
        order = front_to_back_order(grid, cam)
        centers = grid.centers()
        lo, hi = grid.aabbs()
        t = np.array(
            [slab_entry_oracle(cam.center, centers[i], lo[i], hi[i])
             for i in range(len(grid))]
        )
        expected = np.lexsort((grid.codes, grid.levels, t))
        assert np.array_equal(order, expected)
        # strictly sorted by entry distance up to ties
        assert np.all(np.diff(t[order]) >= -1e-12)


class TestSerialization:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        cells = random_disjoint_cells(rng, 50, 3)
        dens = rng.uniform(0, 50, (50, 8)).astype(np.float32)
        colors = rng.uniform(0, 1, (50, 1, 3)).astype(np.float32)
        grid = SparseVoxelGrid(np.array([-2.0, 0.5, 1.0]), 4.0)
        grid.insert_cells(3, cells, dens, colors)
        grid.allocate_features(7)
        grid.features[:] = rng.normal(size=(50, 7)).astype(np.float32)
        grid.feature_weight_sum[:] = rng.uniform(0, 3, 50).astype(np.float32)

        p1 = tmp_path / "a.lesv"
        p2 = tmp_path / "b.lesv"
        grid.save(p1)
        loaded = SparseVoxelGrid.load(p1)
        loaded.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

        order_a = grid.sorted_order()
        order_b = loaded.sorted_order()
        assert np.array_equal(grid.codes[order_a], loaded.codes[order_b])
        assert np.array_equal(grid.corner_densities[order_a],
                              loaded.corner_densities[order_b])
        assert np.array_equal(grid.features[order_a], loaded.features[order_b])
        assert np.array_equal(grid.feature_weight_sum[order_a],
                              loaded.feature_weight_sum[order_b])

    def test_header_magic(self, tmp_path):
        grid = make_grid([(0, 0, 0)], 1)
        path = tmp_path / "g.lesv"
        grid.save(path)
        assert path.read_bytes()[:4] == b"LESV"

    def test_antichain_survives_load(self, tmp_path):
        grid = make_grid([(0, 0, 0)], 2)
        path = tmp_path / "g.lesv"
        grid.save(path)
        loaded = SparseVoxelGrid.load(path)
        with pytest.raises(DomainError):
            loaded.insert(morton_encode(0, 0, 0, 1), np.zeros(8))

    def test_iteration_in_morton_order(self, rng):
        cells = random_disjoint_cells(rng, 30, 3)
        grid = make_grid(cells, 3)
        keys = list(grid.iter_keys())
        codes = [k.code for k in keys]
        assert codes == sorted(codes)
