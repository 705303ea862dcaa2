import numpy as np
import pytest

from voxfuse.camera import Camera
from voxfuse.grid import SparseVoxelGrid, morton_encode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_grid(cells, level, densities=100.0, bounds_min=(-1.0, -1.0, -1.0),
              extent=2.0, colors=None):
    """Grid with same-level voxels at the given integer cells."""
    grid = SparseVoxelGrid(np.asarray(bounds_min, dtype=np.float64), extent)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    dens = np.full((len(cells), 8), densities, dtype=np.float32)
    grid.insert_cells(level, cells, dens, colors)
    return grid


def axis_camera(width=32, height=32, eye=(-3.0, 0.0, 0.0), target=(0.0, 0.0, 0.0),
                focal=40.0):
    return Camera.look_at(focal, focal, width / 2.0, height / 2.0, width, height,
                          np.asarray(eye, dtype=np.float64), np.asarray(target))


def random_disjoint_cells(rng, n, level):
    """n distinct integer cells at the given level."""
    side = 1 << level
    seen = set()
    out = []
    while len(out) < n:
        c = tuple(int(v) for v in rng.integers(0, side, size=3))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return np.array(out, dtype=np.int64)


def single_voxel_grid(level=1, cell=(0, 0, 0), density=1e4, **kw):
    return make_grid([cell], level, density, **kw)
