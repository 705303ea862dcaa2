"""Hierarchical sparse voxel grid with Morton indexing.

Voxels live on an octree lattice over a cubic scene box. A voxel is
addressed by ``VoxelKey(level, code)`` where ``code`` interleaves the cell
coordinates x/y/z with x in the least significant bit of each 3-bit group.
The active set is an antichain: no voxel may be inserted while an octree
ancestor or descendant is active.

Per-voxel payload: eight corner densities, spherical-harmonic color
coefficients (degree 0 by default), and an optional fused feature vector
with its accumulated fusion weight.

Corner index convention: corner ``j`` sits at offsets
``((j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1)`` in (x, y, z), i.e. x varies
fastest, matching the Morton bit order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError

MAX_LEVEL = 21  # 3*21 = 63 bits fit a 64-bit Morton code

GRID_MAGIC = b"LESV"
GRID_VERSION = 1

# Corner offsets, x fastest (bit 0 = x, bit 1 = y, bit 2 = z).
CORNER_OFFSETS = np.array(
    [[(j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)], dtype=np.int64
)

_U = np.uint64


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each value so consecutive bits land 3 apart."""
    v = v.astype(np.uint64) & _U(0x1FFFFF)
    v = (v | (v << _U(32))) & _U(0x1F00000000FFFF)
    v = (v | (v << _U(16))) & _U(0x1F0000FF0000FF)
    v = (v | (v << _U(8))) & _U(0x100F00F00F00F00F)
    v = (v | (v << _U(4))) & _U(0x10C30C30C30C30C3)
    v = (v | (v << _U(2))) & _U(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & _U(0x1249249249249249)
    v = (v ^ (v >> _U(2))) & _U(0x10C30C30C30C30C3)
    v = (v ^ (v >> _U(4))) & _U(0x100F00F00F00F00F)
    v = (v ^ (v >> _U(8))) & _U(0x1F0000FF0000FF)
    v = (v ^ (v >> _U(16))) & _U(0x1F00000000FFFF)
    v = (v ^ (v >> _U(32))) & _U(0x1FFFFF)
    return v


def encode_cells(cells: np.ndarray, level: int) -> np.ndarray:
    """Vectorized Morton encode of integer cell coordinates ``(N, 3)``."""
    cells = np.asarray(cells)
    if level < 0 or level > MAX_LEVEL:
        raise DomainError(f"level {level} outside [0, {MAX_LEVEL}]")
    if cells.size and (cells.min() < 0 or cells.max() >= (1 << level)):
        raise DomainError(f"cell coordinates out of range for level {level}")
    c = cells.astype(np.uint64)
    return (
        _spread_bits(c[..., 0])
        | (_spread_bits(c[..., 1]) << _U(1))
        | (_spread_bits(c[..., 2]) << _U(2))
    )


def decode_codes(codes: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_cells`; returns ``(N, 3)`` int64 cell coords."""
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.stack(
        [
            _compact_bits(codes),
            _compact_bits(codes >> _U(1)),
            _compact_bits(codes >> _U(2)),
        ],
        axis=-1,
    )
    return out.astype(np.int64)


@dataclass(frozen=True, order=True)
class VoxelKey:
    """Octree address: depth plus Morton code. Sorts by (level, code)."""

    level: int
    code: int

    def __post_init__(self):
        if self.level < 0 or self.level > MAX_LEVEL:
            raise DomainError(f"level {self.level} outside [0, {MAX_LEVEL}]")
        if self.code < 0 or self.code >= 8**self.level:
            raise DomainError(f"code {self.code} outside [0, 8^{self.level})")

    def cell(self) -> tuple[int, int, int]:
        ix, iy, iz = decode_codes(np.array([self.code], dtype=np.uint64))[0]
        return int(ix), int(iy), int(iz)

    def ancestor(self, level: int) -> "VoxelKey":
        if level > self.level:
            raise DomainError("ancestor level must not exceed key level")
        return VoxelKey(level, self.code >> (3 * (self.level - level)))


def morton_encode(ix: int, iy: int, iz: int, level: int) -> VoxelKey:
    """Encode cell coordinates into a Morton key, x in the LSB of each group."""
    if level < 0 or level > MAX_LEVEL:
        raise DomainError(f"level {level} outside [0, {MAX_LEVEL}]")
    n = 1 << level
    for name, v in (("ix", ix), ("iy", iy), ("iz", iz)):
        if v < 0 or v >= n:
            raise DomainError(f"{name}={v} outside [0, 2^{level})")
    code = int(
        encode_cells(np.array([[ix, iy, iz]], dtype=np.uint64), level)[0]
    )
    return VoxelKey(level, code)


def morton_decode(key: VoxelKey) -> tuple[int, int, int]:
    return key.cell()


@dataclass
class Voxel:
    """Materialized view of one voxel: geometry plus payload copies."""

    key: VoxelKey
    center: np.ndarray  # (3,) world meters
    size: float  # edge length, meters
    corner_densities: np.ndarray  # (8,) float32, non-negative
    color: np.ndarray  # (n_sh, 3) float32 SH coefficients

    @property
    def lo(self) -> np.ndarray:
        return self.center - 0.5 * self.size

    @property
    def hi(self) -> np.ndarray:
        return self.center + 0.5 * self.size


def trilinear_density(voxel: Voxel, p) -> float:
    """Trilinear blend of the eight corner densities at world point ``p``.

    ``p`` must lie in the voxel's closed cube.
    """
    p = np.asarray(p, dtype=np.float64)
    local = (p - voxel.lo) / voxel.size
    eps = 1e-12
    if np.any(local < -eps) or np.any(local > 1.0 + eps):
        raise DomainError(f"point {p} outside voxel cube")
    local = np.clip(local, 0.0, 1.0)
    basis = trilinear_basis(local[None, :])[0]
    return float(basis @ voxel.corner_densities.astype(np.float64))


def trilinear_basis(local: np.ndarray) -> np.ndarray:
    """Per-corner trilinear weights for local coords ``(P, 3)`` in [0,1]^3."""
    u, v, w = local[:, 0], local[:, 1], local[:, 2]
    fx = np.stack([1.0 - u, u], axis=1)
    fy = np.stack([1.0 - v, v], axis=1)
    fz = np.stack([1.0 - w, w], axis=1)
    j = np.arange(8)
    return (
        fx[:, j & 1] * fy[:, (j >> 1) & 1] * fz[:, (j >> 2) & 1]
    )


def trilinear_gradient(corners: np.ndarray, local: np.ndarray, size) -> np.ndarray:
    """World-space gradient of the trilinear field.

    corners: (P, 8) values; local: (P, 3) in [0,1]^3; size: scalar or (P,).
    Returns (P, 3).
    """
    u, v, w = local[:, 0], local[:, 1], local[:, 2]
    j = np.arange(8)
    fx = np.stack([1.0 - u, u], axis=1)[:, j & 1]
    fy = np.stack([1.0 - v, v], axis=1)[:, (j >> 1) & 1]
    fz = np.stack([1.0 - w, w], axis=1)[:, (j >> 2) & 1]
    sx = np.where(j & 1, 1.0, -1.0)
    sy = np.where((j >> 1) & 1, 1.0, -1.0)
    sz = np.where((j >> 2) & 1, 1.0, -1.0)
    gx = np.sum(corners * sx * fy * fz, axis=1)
    gy = np.sum(corners * fx * sy * fz, axis=1)
    gz = np.sum(corners * fx * fy * sz, axis=1)
    return np.stack([gx, gy, gz], axis=1) / np.asarray(size, dtype=np.float64).reshape(-1, 1)


def sh_basis(dirs: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Real spherical-harmonic basis up to degree 2, evaluated at unit dirs.

    The DC term is 1 (not 0.2821) so a degree-0 grid renders its stored
    coefficient as-is.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.ones_like(x)]
    if n_coeffs > 1:
        cols += [0.488603 * y, 0.488603 * z, 0.488603 * x]
    if n_coeffs > 4:
        cols += [
            1.092548 * x * y,
            1.092548 * y * z,
            0.315392 * (3.0 * z * z - 1.0),
            1.092548 * x * z,
            0.546274 * (x * x - y * y),
        ]
    if n_coeffs > 9:
        raise DomainError("SH degree > 2 not supported")
    return np.stack(cols[:n_coeffs], axis=1)


class SparseVoxelGrid:
    """Sparse antichain voxel set over a cubic world box.

    Storage is columnar: parallel numpy arrays in insertion order plus a
    key index. ``sorted_order`` gives the canonical (level, code) order
    used for iteration and serialization.
    """

    def __init__(self, bounds_min, extent: float, sh_coeffs: int = 1):
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64).copy()
        if self.bounds_min.shape != (3,):
            raise DomainError("bounds_min must be a 3-vector")
        if not np.isfinite(extent) or extent <= 0:
            raise DomainError("extent must be positive and finite")
        if sh_coeffs not in (1, 4, 9):
            raise DomainError("sh_coeffs must be 1, 4 or 9")
        self.extent = float(extent)
        self.sh_coeffs = int(sh_coeffs)
        self._levels = np.zeros(0, dtype=np.int32)
        self._codes = np.zeros(0, dtype=np.uint64)
        self._densities = np.zeros((0, 8), dtype=np.float32)
        self._colors = np.zeros((0, self.sh_coeffs, 3), dtype=np.float32)
        self.features: np.ndarray | None = None  # (N, D) float32
        self.feature_weight_sum = np.zeros(0, dtype=np.float32)
        self._index: dict[tuple[int, int], int] = {}
        self._subtree: dict[tuple[int, int], int] = {}

    # -- basic accessors ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._levels)

    def __contains__(self, key: VoxelKey) -> bool:
        return (key.level, key.code) in self._index

    @property
    def bounds_max(self) -> np.ndarray:
        return self.bounds_min + self.extent

    @property
    def levels(self) -> np.ndarray:
        return self._levels

    @property
    def codes(self) -> np.ndarray:
        return self._codes

    @property
    def corner_densities(self) -> np.ndarray:
        return self._densities

    @property
    def colors(self) -> np.ndarray:
        return self._colors

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def index_of(self, key: VoxelKey) -> int:
        try:
            return self._index[(key.level, key.code)]
        except KeyError:
            raise DomainError(f"unknown voxel key {key}") from None

    def sizes(self) -> np.ndarray:
        return self.extent / np.exp2(self._levels.astype(np.float64))

    def centers(self) -> np.ndarray:
        cells = decode_codes(self._codes).astype(np.float64)
        size = self.sizes()
        return self.bounds_min[None, :] + (cells + 0.5) * size[:, None]

    def sorted_order(self) -> np.ndarray:
        """Indices sorted by (level, code): the canonical total order."""
        return np.lexsort((self._codes, self._levels))

    def iter_keys(self):
        for i in self.sorted_order():
            yield VoxelKey(int(self._levels[i]), int(self._codes[i]))

    def voxel(self, key: VoxelKey) -> Voxel:
        i = self.index_of(key)
        size = self.extent / (1 << key.level)
        cell = np.asarray(key.cell(), dtype=np.float64)
        center = self.bounds_min + (cell + 0.5) * size
        return Voxel(
            key=key,
            center=center,
            size=float(size),
            corner_densities=self._densities[i].copy(),
            color=self._colors[i].copy(),
        )

    # -- mutation ----------------------------------------------------------

    def _check_antichain(self, key: tuple[int, int]):
        level, code = key
        if key in self._index:
            raise DomainError(f"voxel (level={level}, code={code}) already active")
        if self._subtree.get(key, 0) > 0:
            raise DomainError(
                f"voxel (level={level}, code={code}) has an active descendant"
            )
        for lv in range(level):
            if (lv, code >> (3 * (level - lv))) in self._index:
                raise DomainError(
                    f"voxel (level={level}, code={code}) has an active ancestor"
                )

    def _validate_payload(self, densities: np.ndarray, colors: np.ndarray):
        if not np.all(np.isfinite(densities)) or np.any(densities < 0):
            raise DomainError("corner densities must be finite and non-negative")
        if not np.all(np.isfinite(colors)) or np.any(colors < 0) or np.any(colors > 1):
            raise DomainError("color coefficients must lie in [0, 1]")

    def insert(self, key: VoxelKey, corner_densities, color=None) -> int:
        """Insert one voxel; rejects antichain violations."""
        densities = np.asarray(corner_densities, dtype=np.float32).reshape(8)
        if color is None:
            color = np.full((self.sh_coeffs, 3), 0.5, dtype=np.float32)
            color[1:] = 0.0
        color = np.asarray(color, dtype=np.float32).reshape(self.sh_coeffs, 3)
        self._validate_payload(densities, color)
        k = (key.level, key.code)
        self._check_antichain(k)
        i = len(self)
        self._levels = np.append(self._levels, np.int32(key.level))
        self._codes = np.append(self._codes, np.uint64(key.code))
        self._densities = np.vstack([self._densities, densities[None, :]])
        self._colors = np.concatenate([self._colors, color[None]], axis=0)
        self.feature_weight_sum = np.append(self.feature_weight_sum, np.float32(0))
        if self.features is not None:
            self.features = np.vstack(
                [self.features, np.zeros((1, self.features.shape[1]), np.float32)]
            )
        self._index[k] = i
        for lv in range(key.level):
            a = (lv, key.code >> (3 * (key.level - lv)))
            self._subtree[a] = self._subtree.get(a, 0) + 1
        return i

    def insert_cells(self, level: int, cells: np.ndarray, densities: np.ndarray,
                     colors: np.ndarray | None = None) -> np.ndarray:
        """Bulk insert same-level voxels given integer cell coords ``(N, 3)``."""
        cells = np.asarray(cells, dtype=np.int64)
        densities = np.asarray(densities, dtype=np.float32).reshape(-1, 8)
        n = len(cells)
        if densities.shape[0] != n:
            raise DomainError("densities row count must match cells")
        if colors is None:
            colors = np.zeros((n, self.sh_coeffs, 3), dtype=np.float32)
            colors[:, 0] = 0.5
        colors = np.asarray(colors, dtype=np.float32).reshape(n, self.sh_coeffs, 3)
        self._validate_payload(densities, colors)
        codes = encode_cells(cells, level)
        if len(np.unique(codes)) != n:
            raise DomainError("duplicate cells in bulk insert")
        for code in codes:
            self._check_antichain((level, int(code)))
        base = len(self)
        self._levels = np.concatenate([self._levels, np.full(n, level, np.int32)])
        self._codes = np.concatenate([self._codes, codes])
        self._densities = np.vstack([self._densities, densities])
        self._colors = np.concatenate([self._colors, colors], axis=0)
        self.feature_weight_sum = np.concatenate(
            [self.feature_weight_sum, np.zeros(n, np.float32)]
        )
        if self.features is not None:
            self.features = np.vstack(
                [self.features, np.zeros((n, self.features.shape[1]), np.float32)]
            )
        for j, code in enumerate(codes):
            k = (level, int(code))
            self._index[k] = base + j
            for lv in range(level):
                a = (lv, int(code) >> (3 * (level - lv)))
                self._subtree[a] = self._subtree.get(a, 0) + 1
        return np.arange(base, base + n)

    def allocate_features(self, dim: int):
        if dim <= 0:
            raise DomainError("feature dim must be positive")
        self.features = np.zeros((len(self), dim), dtype=np.float32)
        self.feature_weight_sum = np.zeros(len(self), dtype=np.float32)

    @property
    def fused_mask(self) -> np.ndarray:
        return self.feature_weight_sum > 0

    # -- geometry helpers ---------------------------------------------------

    def aabbs(self) -> tuple[np.ndarray, np.ndarray]:
        centers = self.centers()
        half = 0.5 * self.sizes()[:, None]
        return centers - half, centers + half

    def evaluate_colors(self, view_dirs: np.ndarray) -> np.ndarray:
        """Per-voxel RGB for unit view directions ``(N, 3)``."""
        basis = sh_basis(view_dirs, self.sh_coeffs)  # (N, S)
        return np.einsum("ns,nsc->nc", basis, self._colors.astype(np.float64))

    # -- serialization -------------------------------------------------------

    def save(self, path):
        """Binary container; layout documented in docs/formats.md."""
        order = self.sorted_order()
        dim = self.feature_dim
        with open(path, "wb") as f:
            f.write(GRID_MAGIC)
            f.write(struct.pack("<I", GRID_VERSION))
            f.write(struct.pack("<6d", *self.bounds_min, *self.bounds_max))
            f.write(struct.pack("<QII", len(self), dim, self.sh_coeffs))
            for i in order:
                f.write(struct.pack("<IQ", int(self._levels[i]), int(self._codes[i])))
                f.write(self._densities[i].astype("<f4").tobytes())
                f.write(self._colors[i].astype("<f4").tobytes())
                f.write(struct.pack("<f", float(self.feature_weight_sum[i])))
                if dim:
                    f.write(self.features[i].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SparseVoxelGrid":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != GRID_MAGIC:
            raise DataError(f"{path}: bad magic, expected {GRID_MAGIC!r}")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != GRID_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        b = struct.unpack_from("<6d", data, 8)
        count, dim, sh = struct.unpack_from("<QII", data, 56)
        bounds_min = np.array(b[:3])
        extent_v = np.array(b[3:]) - bounds_min
        if not np.allclose(extent_v, extent_v[0], rtol=0, atol=1e-9):
            raise DataError(f"{path}: non-cubic bounds")
        grid = cls(bounds_min, float(extent_v[0]), sh_coeffs=sh)
        rec = 12 + 8 * 4 + sh * 3 * 4 + 4 + dim * 4
        off = 72
        if len(data) != off + rec * count:
            raise DataError(f"{path}: truncated container")
        levels = np.zeros(count, np.int32)
        codes = np.zeros(count, np.uint64)
        dens = np.zeros((count, 8), np.float32)
        cols = np.zeros((count, sh, 3), np.float32)
        wsum = np.zeros(count, np.float32)
        feats = np.zeros((count, dim), np.float32) if dim else None
        for i in range(count):
            levels[i], codes[i] = struct.unpack_from("<IQ", data, off)
            off += 12
            dens[i] = np.frombuffer(data, "<f4", 8, off)
            off += 32
            cols[i] = np.frombuffer(data, "<f4", sh * 3, off).reshape(sh, 3)
            off += sh * 12
            (wsum[i],) = struct.unpack_from("<f", data, off)
            off += 4
            if dim:
                feats[i] = np.frombuffer(data, "<f4", dim, off)
                off += dim * 4
        grid._levels = levels
        grid._codes = codes
        grid._densities = dens
        grid._colors = cols
        grid.feature_weight_sum = wsum
        grid.features = feats
        grid._index = {
            (int(levels[i]), int(codes[i])): i for i in range(count)
        }
        if len(grid._index) != count:
            raise DataError(f"{path}: duplicate voxel keys")
        for i in range(count):
            level, code = int(levels[i]), int(codes[i])
            for lv in range(level):
                a = (lv, code >> (3 * (level - lv)))
                grid._subtree[a] = grid._subtree.get(a, 0) + 1
        return grid


def ray_entry_distances(grid: SparseVoxelGrid, origin: np.ndarray) -> np.ndarray:
    """Slab-method entry distance from ``origin`` toward each voxel center.

    Inside-voxel origins clamp to 0.
    """
    lo, hi = grid.aabbs()
    centers = grid.centers()
    d = centers - origin[None, :]
    norm = np.linalg.norm(d, axis=1)
    norm = np.where(norm == 0, 1.0, norm)
    d = d / norm[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin[None, :]) / d
        t1 = (hi - origin[None, :]) / d
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: ignore the degenerate axis (origin is inside its slab
    # because the ray points at the center)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_in = tmin.max(axis=1)
    return np.maximum(t_in, 0.0)


def front_to_back_order(grid: SparseVoxelGrid, camera) -> np.ndarray:
    """Voxel indices sorted by ray-entry distance from the camera center.

    Ties break on (level, code) so the order is total and deterministic.
    """
    if len(grid) == 0:
        return np.zeros(0, dtype=np.int64)
    t_in = ray_entry_distances(grid, np.asarray(camera.center, dtype=np.float64))
    return np.lexsort((grid.codes, grid.levels, t_in))
