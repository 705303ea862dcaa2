"""Truncated signed distance fields: projective integration of posed depth
maps per octree level, multi-level confidence blending, and marching-cubes
surface extraction.

A field stores one scalar pair (phi, weight) per lattice corner of its
level; the lattice is kept dense per level for vectorized updates, with
weight 0 marking unobserved corners (phi NaN). Sign convention: positive
in free space (in front of the observed surface), negative behind it.

Blending fills or mixes each fine corner from its coarse parent corner
(integer division of lattice coordinates): unobserved fine trusts coarse,
unobserved coarse keeps fine, and twin observations mix with a sigmoid of
the fine observation weight against a quantile threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .camera import Camera
from .errors import DomainError
from .image import ImagePlane

MAX_DENSE_LEVEL = 8  # (2^L + 1)^3 corners are materialized per level

# corner j offsets with x in bit 0 (matches the voxel corner convention)
_CORNER = np.array([[(j >> 0) & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)],
                   dtype=np.int64)

# cube edges as corner-index pairs, sorted
_EDGES = []
for a in range(3):
    for j in range(8):
        if not (j >> a) & 1:
            _EDGES.append((j, j | (1 << a)))
_EDGES = sorted(set(tuple(sorted(e)) for e in _EDGES))
_EDGE_ID = {e: i for i, e in enumerate(_EDGES)}

# faces as cyclic corner quads [p0, p1, p2, p3]
_FACES = [
    [0, 2, 6, 4],  # x = 0
    [1, 3, 7, 5],  # x = 1
    [0, 1, 5, 4],  # y = 0
    [2, 3, 7, 6],  # y = 1
    [0, 1, 3, 2],  # z = 0
    [4, 5, 7, 6],  # z = 1
]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64 world coords
    triangles: np.ndarray  # (T, 3) int64
    normals: np.ndarray | None = None  # (V, 3) float64 unit

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise DomainError("triangle index out of range")


class TsdfField:
    """Per-level TSDF lattice over the cubic scene box."""

    def __init__(self, level: int, trunc: float, bounds_min, extent: float):
        if level < 0 or level > MAX_DENSE_LEVEL:
            raise DomainError(f"tsdf level {level} outside [0, {MAX_DENSE_LEVEL}]")
        if trunc <= 0:
            raise DomainError("trunc must be positive")
        self.level = int(level)
        self.trunc = float(trunc)
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64).copy()
        self.extent = float(extent)
        self.n = (1 << level) + 1  # corners per axis
        self.edge = self.extent / (1 << level)
        self.phi = np.full(self.n**3, np.nan, dtype=np.float32)
        self.weight = np.zeros(self.n**3, dtype=np.float32)
        self._coords: np.ndarray | None = None
        self._world: np.ndarray | None = None

    def copy(self) -> "TsdfField":
        out = TsdfField(self.level, self.trunc, self.bounds_min, self.extent)
        out.phi = self.phi.copy()
        out.weight = self.weight.copy()
        return out

    def coords(self) -> np.ndarray:
        """All lattice corner integer coords, shape (n^3, 3), x fastest."""
        if self._coords is None:
            r = np.arange(self.n, dtype=np.int64)
            zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
            self._coords = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        return self._coords

    def flat_index(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        return (coords[..., 2] * self.n + coords[..., 1]) * self.n + coords[..., 0]

    def corner_world(self, coords: np.ndarray) -> np.ndarray:
        return self.bounds_min[None, :] + np.asarray(coords, np.float64) * self.edge

    def world_points(self) -> np.ndarray:
        """Cached world positions of every lattice corner, (n^3, 3)."""
        if self._world is None:
            self._world = self.corner_world(self.coords())
        return self._world

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    def observed_count(self) -> int:
        return int(np.count_nonzero(self.weight > 0))

    def get(self, coord) -> tuple[float, float]:
        i = int(self.flat_index(np.asarray(coord)))
        return float(self.phi[i]), float(self.weight[i])

    def set(self, coord, phi: float, weight: float):
        i = int(self.flat_index(np.asarray(coord)))
        self.phi[i] = phi
        self.weight[i] = weight

    def volume(self) -> tuple[np.ndarray, np.ndarray]:
        """(phi, observed) as dense (n, n, n) arrays indexed [z, y, x]."""
        return (
            self.phi.reshape(self.n, self.n, self.n),
            (self.weight > 0).reshape(self.n, self.n, self.n),
        )


def integrate_depth(field: TsdfField, camera: Camera, depth: ImagePlane) -> TsdfField:
    """Projective TSDF update from one posed depth map (in place).

    Depth values are pinhole z-depth. Each corner projecting into a valid
    pixel with signed distance ``sd = depth(px) - z_corner > -trunc``
    receives the running-mean update with observation weight 1.
    """
    vals = depth.values[depth.valid]
    if vals.size and vals.min() <= 0:
        raise DomainError("depth map valid pixels must be positive")
    pc = (field.world_points() - camera.translation[None, :]) @ camera.rotation
    z = pc[:, 2]
    zpos = z > 0
    zsafe = np.where(zpos, z, 1.0)
    col = np.floor(camera.fx * pc[:, 0] / zsafe + camera.cx).astype(np.int64)
    row = np.floor(camera.fy * pc[:, 1] / zsafe + camera.cy).astype(np.int64)
    ok = (
        zpos
        & (col >= 0) & (col < camera.width)
        & (row >= 0) & (row < camera.height)
    )
    col_c = np.where(ok, col, 0)
    row_c = np.where(ok, row, 0)
    ok &= depth.valid[row_c, col_c]
    d = depth.values[row_c, col_c]
    sd = d - z
    upd = ok & (sd > -field.trunc)
    if not upd.any():
        return field
    phi_new = np.clip(sd[upd], -field.trunc, field.trunc)
    w = field.weight[upd].astype(np.float64)
    old = field.phi[upd].astype(np.float64)
    merged = np.where(w > 0, (w * old + phi_new) / (w + 1.0), phi_new)
    field.phi[upd] = merged.astype(np.float32)
    field.weight[upd] = (w + 1.0).astype(np.float32)
    return field


def blend_multilevel(fine: TsdfField, coarse_levels: list[TsdfField],
                     tau_q: float = 0.3, temperature: float = 0.5) -> TsdfField:
    """Confidence-weighted multi-level fill of the fine field.

    Per coarse level (in order): tau is the ``tau_q`` quantile of the
    current observed fine weights; each fine corner blends with its parent
    coarse corner using alpha = 0 (fine unobserved, trust coarse), 1
    (coarse unobserved, keep fine) or sigmoid((w - tau) / (tau * T)).
    Newly filled corners inherit the coarse observation weight so the
    observed-set invariant (weight > 0 iff phi defined) is preserved.
    """
    if not (0.0 < tau_q < 1.0):
        raise DomainError("tau_q must lie in (0, 1)")
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    if fine.observed_count() == 0:
        raise DomainError("fine field has no observed corners")
    result = fine.copy()
    coords = fine.coords()
    for coarse in coarse_levels:
        if coarse.level >= fine.level:
            raise DomainError("coarse levels must be strictly coarser than fine")
        ratio = 1 << (fine.level - coarse.level)
        tau = float(np.quantile(result.weight[result.weight > 0].astype(np.float64), tau_q))
        cidx = coarse.flat_index(coords // ratio)
        phi_c = coarse.phi[cidx].astype(np.float64)
        w_c = coarse.weight[cidx].astype(np.float64)
        fine_obs = result.weight > 0
        coarse_obs = w_c > 0
        alpha = np.where(
            ~fine_obs,
            0.0,
            np.where(
                ~coarse_obs,
                1.0,
                expit((result.weight.astype(np.float64) - tau) / (tau * temperature)),
            ),
        )
        blended = alpha * np.where(fine_obs, result.phi.astype(np.float64), 0.0) + (
            1.0 - alpha
        ) * np.where(coarse_obs, phi_c, 0.0)
        defined = fine_obs | coarse_obs
        blended = np.clip(blended, -fine.trunc, fine.trunc)
        result.phi = np.where(defined, blended, np.nan).astype(np.float32)
        result.weight = np.where(
            defined & ~fine_obs, w_c, result.weight.astype(np.float64)
        ).astype(np.float32)
    return result


def _face_is_diagonal(config: int, face) -> bool:
    p0, p1, p2, p3 = face
    b = [(config >> p) & 1 for p in (p0, p1, p2, p3)]
    return b[0] == b[2] and b[1] == b[3] and b[0] != b[1]


def _face_connected(phis, face) -> bool:
    """Asymptotic decider: do the negative blobs meet at the face center?"""
    f0, f1, f2, f3 = (float(phis[p]) for p in face)
    denom = f0 + f2 - f1 - f3
    if abs(denom) <= 1e-300:
        return False
    return (f0 * f2 - f1 * f3) / denom < 0.0


def _face_pairs(config: int, face, connected: bool):
    """Pair the cut edges of one face; topology only."""
    p0, p1, p2, p3 = face
    cyc = [(p0, p1), (p1, p2), (p2, p3), (p3, p0)]
    cut = [tuple(sorted(e)) for e in cyc
           if ((config >> e[0]) & 1) != ((config >> e[1]) & 1)]
    if len(cut) == 0:
        return []
    if len(cut) == 2:
        return [(cut[0], cut[1])]
    e01, e12, e23, e30 = (tuple(sorted(e)) for e in cyc)
    if (config >> p0) & 1:  # inside diagonal is (p0, p2)
        if connected:
            return [(e01, e12), (e23, e30)]
        return [(e01, e30), (e12, e23)]
    if connected:
        return [(e30, e01), (e12, e23)]
    return [(e01, e12), (e23, e30)]


def _cell_polygons(config: int, ambig_mask: int) -> list[list[tuple[int, int]]]:
    """Closed isosurface polygons as corner-pair edge loops (topology only)."""
    adj: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for fi, face in enumerate(_FACES):
        for ea, eb in _face_pairs(config, face, bool((ambig_mask >> fi) & 1)):
            adj.setdefault(ea, []).append(eb)
            adj.setdefault(eb, []).append(ea)
    polys = []
    visited = set()
    for start in sorted(adj.keys()):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        prev, cur = None, start
        while True:
            nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
            if nxt == start:
                break
            loop.append(nxt)
            visited.add(nxt)
            prev, cur = cur, nxt
        polys.append(loop)
    return polys


_POLY_CACHE: dict[tuple[int, int], list[list[tuple[int, int]]]] = {}
_DIAG_FACES: dict[int, list[int]] = {}


def _diag_faces(config: int) -> list[int]:
    faces = _DIAG_FACES.get(config)
    if faces is None:
        faces = [fi for fi, f in enumerate(_FACES) if _face_is_diagonal(config, f)]
        _DIAG_FACES[config] = faces
    return faces


def extract_mesh(field: TsdfField) -> TriangleMesh:
    """Marching cubes over cells whose 8 corners are all observed.

    Vertices sit at the linear zero crossing of each sign-changing edge;
    triangle winding puts the geometric normal along decreasing phi.
    """
    phi_d, obs_d = field.volume()
    n = field.n
    if n < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    # cells indexed [z, y, x]
    all_obs = np.ones((n - 1, n - 1, n - 1), dtype=bool)
    cnt_inside = np.zeros((n - 1, n - 1, n - 1), dtype=np.int8)
    for dx, dy, dz in ((o[0], o[1], o[2]) for o in _CORNER):
        sub_o = obs_d[dz : dz + n - 1, dy : dy + n - 1, dx : dx + n - 1]
        sub_p = phi_d[dz : dz + n - 1, dy : dy + n - 1, dx : dx + n - 1]
        all_obs &= sub_o
        cnt_inside += (np.nan_to_num(sub_p, nan=np.inf) < 0).astype(np.int8)
    mixed = all_obs & (cnt_inside > 0) & (cnt_inside < 8)
    cells = np.argwhere(mixed)  # (M, 3) as (z, y, x), lex sorted
    if len(cells) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    # gather the 8 corner phis per mixed cell
    cphi = np.empty((len(cells), 8), dtype=np.float64)
    for j, (dx, dy, dz) in enumerate(_CORNER):
        cphi[:, j] = phi_d[cells[:, 0] + dz, cells[:, 1] + dy, cells[:, 2] + dx]
    cphi_rows = cphi.tolist()
    cell_rows = cells.tolist()

    verts: list[tuple[float, float, float]] = []
    vert_of_edge: dict[tuple, int] = {}
    tri_rows: list[tuple[int, int, int]] = []
    bx, by, bz = (float(v) for v in field.bounds_min)
    e_len = float(field.edge)
    offs = [tuple(int(v) for v in o) for o in _CORNER]
    # per-corner gradient signs for the cell-center trilinear gradient
    gsign = [(1.0 if o[0] else -1.0, 1.0 if o[1] else -1.0, 1.0 if o[2] else -1.0)
             for o in offs]

    def edge_vertex(cx, cy, cz, phis, ca, cb) -> int:
        oa, ob = offs[ca], offs[cb]
        ga = (cx + oa[0], cy + oa[1], cz + oa[2])
        gb = (cx + ob[0], cy + ob[1], cz + ob[2])
        key = (ga, gb)
        iv = vert_of_edge.get(key)
        if iv is not None:
            return iv
        fa, fb = phis[ca], phis[cb]
        t = fa / (fa - fb)
        pa = (bx + ga[0] * e_len, by + ga[1] * e_len, bz + ga[2] * e_len)
        # zero-valued corners: emit the exact corner position so coincident
        # vertices from different edges weld cleanly afterwards
        if t <= 0.0:
            p = pa
        elif t >= 1.0:
            p = (bx + gb[0] * e_len, by + gb[1] * e_len, bz + gb[2] * e_len)
        else:
            pb = (bx + gb[0] * e_len, by + gb[1] * e_len, bz + gb[2] * e_len)
            p = (pa[0] + t * (pb[0] - pa[0]),
                 pa[1] + t * (pb[1] - pa[1]),
                 pa[2] + t * (pb[2] - pa[2]))
        iv = len(verts)
        verts.append(p)
        vert_of_edge[key] = iv
        return iv

    for row in range(len(cell_rows)):
        cz, cy, cx = cell_rows[row]
        phis = cphi_rows[row]
        config = 0
        for j in range(8):
            if phis[j] < 0.0:
                config |= 1 << j
        ambig = 0
        for fi in _diag_faces(config):
            if _face_connected(phis, _FACES[fi]):
                ambig |= 1 << fi
        key = (config, ambig)
        polys = _POLY_CACHE.get(key)
        if polys is None:
            polys = _cell_polygons(config, ambig)
            _POLY_CACHE[key] = polys
        if not polys:
            continue
        gx = gy = gz = 0.0
        for j in range(8):
            s = gsign[j]
            p = 0.25 * phis[j]
            gx += p * s[0]
            gy += p * s[1]
            gz += p * s[2]
        for loop in polys:
            ids = [edge_vertex(cx, cy, cz, phis, e[0], e[1]) for e in loop]
            pts = [verts[i] for i in ids]
            m = len(pts)
            cxm = sum(p[0] for p in pts) / m
            cym = sum(p[1] for p in pts) / m
            czm = sum(p[2] for p in pts) / m
            nx = ny = nz = 0.0
            for i in range(m):
                ax, ay, az = pts[i][0] - cxm, pts[i][1] - cym, pts[i][2] - czm
                q = pts[(i + 1) % m]
                bx2, by2, bz2 = q[0] - cxm, q[1] - cym, q[2] - czm
                nx += ay * bz2 - az * by2
                ny += az * bx2 - ax * bz2
                nz += ax * by2 - ay * bx2
            if nx * gx + ny * gy + nz * gz > 0.0:
                ids.reverse()
            for i in range(1, len(ids) - 1):
                tri_rows.append((ids[0], ids[i], ids[i + 1]))

    if not tri_rows:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    vertices = np.array(verts)
    triangles = np.array(tri_rows, dtype=np.int64)
    # weld bit-identical positions (zero crossings that landed on corners)
    vertices, inverse = np.unique(vertices, axis=0, return_inverse=True)
    triangles = inverse.reshape(-1)[triangles.reshape(-1)].reshape(-1, 3)
    # drop degenerate triangles (repeated vertices or exactly zero area)
    distinct = (
        (triangles[:, 0] != triangles[:, 1])
        & (triangles[:, 1] != triangles[:, 2])
        & (triangles[:, 0] != triangles[:, 2])
    )
    triangles = triangles[distinct]
    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    triangles = triangles[area2 > 0]
    normals = _vertex_normals(vertices, triangles)
    return TriangleMesh(vertices, triangles, normals)


def _vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    normals = np.zeros_like(vertices)
    if len(triangles):
        fn = np.cross(
            vertices[triangles[:, 1]] - vertices[triangles[:, 0]],
            vertices[triangles[:, 2]] - vertices[triangles[:, 0]],
        )
        for c in range(3):
            np.add.at(normals, triangles[:, c], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.where(norm > 0, normals / np.maximum(norm, 1e-30), 0.0)


def boundary_edge_count(mesh: TriangleMesh) -> int:
    """Edges referenced by exactly one triangle (open-boundary proxy)."""
    if len(mesh.triangles) == 0:
        return 0
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.count_nonzero(counts == 1))
