"""Synthetic scenes with analytic geometry: exact primitive ray
intersections, signed distances, surface normals, class labels, and
seeded feature maps built from orthonormal class prototypes plus Gaussian
noise. Everything is deterministic for a fixed seed.

Depth maps store pinhole z-depth of the exact hit point. Feature maps
assign every pixel the prototype of the class it sees (background pixels
get a dedicated background prototype, which is never queried).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import DataError, DomainError
from .image import ImagePlane


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise DomainError("sphere radius must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - self.center[None, :], axis=1) - self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4.0 * c
        t = np.full(len(dirs), np.inf)
        ok = disc > 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / 2.0
        t2 = (-b + sq) / 2.0
        cand = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
        t[ok] = cand[ok]
        return t

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        n = pts - self.center[None, :]
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center[None, :] + self.radius * v

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(),
                "radius": self.radius, "class_id": self.class_id}


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(self.half_extents <= 0):
            raise DomainError("box half extents must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - self.center[None, :]) - self.half_extents[None, :]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = self.center - self.half_extents
        hi = self.center + self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo[None, :] - origin[None, :]) / dirs
            t1 = (hi[None, :] - origin[None, :]) / dirs
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        zero = dirs == 0.0
        if zero.any():
            inside = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
            tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
        t_in = tmin.max(axis=1)
        t_out = tmax.min(axis=1)
        hit = (t_out >= t_in) & (t_out > 1e-9)
        t = np.where(t_in > 1e-9, t_in, t_out)
        return np.where(hit, t, np.inf)

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        q = (pts - self.center[None, :]) / self.half_extents[None, :]
        axis = np.abs(q).argmax(axis=1)
        n = np.zeros_like(pts)
        rows = np.arange(len(pts))
        n[rows, axis] = np.sign(q[rows, axis])
        return n

    def area(self) -> float:
        a, b, c = self.half_extents * 2.0
        return 2.0 * (a * b + b * c + c * a)

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        a, b, c = self.half_extents * 2.0
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.zeros((n, 3))
        for f in range(6):
            m = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * self.half_extents[axis]
            pts[m, others[0]] = uv[m, 0] * self.half_extents[others[0]]
            pts[m, others[1]] = uv[m, 1] * self.half_extents[others[1]]
        return pts + self.center[None, :]

    def to_dict(self) -> dict:
        return {"type": "box", "center": self.center.tolist(),
                "half_extents": self.half_extents.tolist(), "class_id": self.class_id}


@dataclass
class Plane:
    """Half-space ``normal . x <= offset`` whose boundary is the surface."""

    normal: np.ndarray
    offset: float
    class_id: int

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.normal)
        if n == 0:
            raise DomainError("plane normal must be non-zero")
        self.normal = self.normal / n

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.normal - self.offset

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, pts.shape).copy()

    def to_dict(self) -> dict:
        return {"type": "plane", "normal": self.normal.tolist(),
                "offset": self.offset, "class_id": self.class_id}


def primitive_from_dict(d: dict):
    try:
        kind = d["type"]
        if kind == "sphere":
            return Sphere(d["center"], float(d["radius"]), int(d["class_id"]))
        if kind == "box":
            return Box(d["center"], d["half_extents"], int(d["class_id"]))
        if kind == "plane":
            return Plane(d["normal"], float(d["offset"]), int(d["class_id"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad primitive record {d!r}") from exc
    raise DataError(f"unknown primitive type {kind!r}")


@dataclass
class SynthSceneSpec:
    primitives: list
    classes: list[str]
    embed_dim: int = 16
    noise_sigma: float = 0.3
    n_views: int = 32
    orbit_radius: float = 1.9
    orbit_heights: tuple[float, ...] = (1.0, 1.8)
    target: tuple[float, float, float] = (0.0, 0.0, -0.1)
    image_size: int = 128
    focal_factor: float = 0.9
    bounds_min: tuple[float, float, float] = (-1.28, -1.28, -1.28)
    extent: float = 2.56
    voxel_level: int = 6
    coarse_levels: tuple[int, ...] = (5, 4)

    def __post_init__(self):
        n_cls = len(self.classes)
        if any(p.class_id >= n_cls or p.class_id < 0 for p in self.primitives):
            raise DomainError("primitive class_id out of range")
        if self.embed_dim < n_cls + 1:
            raise DomainError("embed_dim must exceed the class count")


def default_five_object_spec(**overrides) -> SynthSceneSpec:
    """Desk-scale scene: a floor plane plus two spheres and two boxes."""
    primitives = [
        Plane([0.0, 0.0, 1.0], -0.5, 0),
        Sphere([-0.45, -0.3, -0.2], 0.3, 1),
        Sphere([0.5, 0.35, -0.25], 0.25, 2),
        Box([0.05, -0.45, -0.3], [0.25, 0.2, 0.2], 3),
        Box([-0.1, 0.5, -0.35], [0.2, 0.25, 0.15], 4),
    ]
    classes = ["floor", "large ball", "small ball", "wide crate", "tall crate"]
    return SynthSceneSpec(primitives=primitives, classes=classes, **overrides)


def orbit_cameras(spec: SynthSceneSpec) -> list[Camera]:
    w = h = spec.image_size
    fx = fy = spec.focal_factor * w
    cams = []
    rings = len(spec.orbit_heights)
    per = [spec.n_views // rings + (1 if r < spec.n_views % rings else 0)
           for r in range(rings)]
    for r, height in enumerate(spec.orbit_heights):
        for k in range(per[r]):
            ang = 2.0 * np.pi * (k + 0.5 * r) / max(per[r], 1)
            eye = np.array([
                spec.orbit_radius * np.cos(ang),
                spec.orbit_radius * np.sin(ang),
                height,
            ])
            cams.append(Camera.look_at(fx, fy, w / 2.0, h / 2.0, w, h,
                                       eye, spec.target))
    return cams


def class_prototypes(spec: SynthSceneSpec, seed: int) -> np.ndarray:
    """Orthonormal rows, one per class plus a trailing background row."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((spec.embed_dim, spec.embed_dim))
    q, _ = np.linalg.qr(m)
    return q[:, : len(spec.classes) + 1].T.copy()


def scene_raycast(spec: SynthSceneSpec, camera: Camera):
    """Exact per-pixel hit: (z_depth, class_id, normal, hit mask)."""
    w, h = camera.width, camera.height
    cols, rows = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    dirs = camera.rays_for_pixels(cols.ravel() + 0.5, rows.ravel() + 0.5)
    origin = camera.center
    best_t = np.full(w * h, np.inf)
    best_p = np.full(w * h, -1, dtype=np.int64)
    for pi, prim in enumerate(spec.primitives):
        t = prim.intersect(origin, dirs)
        finite = np.isfinite(t)
        pts = origin[None, :] + np.where(finite, t, 0.0)[:, None] * dirs
        inb = finite & np.all(
            (pts >= np.asarray(spec.bounds_min)[None, :] - 1e-9)
            & (pts <= np.asarray(spec.bounds_min)[None, :] + spec.extent + 1e-9),
            axis=1,
        )
        t = np.where(inb, t, np.inf)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_p[closer] = pi
    hit = np.isfinite(best_t)
    pts = origin[None, :] + np.where(hit, best_t, 0.0)[:, None] * dirs
    z = camera.world_to_camera(pts)[:, 2]
    normals = np.zeros((w * h, 3))
    classes = np.full(w * h, -1, dtype=np.int64)
    for pi, prim in enumerate(spec.primitives):
        m = hit & (best_p == pi)
        if m.any():
            normals[m] = prim.normal_at(pts[m])
            classes[m] = prim.class_id
    return (
        np.where(hit, z, 0.0).reshape(h, w),
        classes.reshape(h, w),
        normals.reshape(h, w, 3),
        hit.reshape(h, w),
    )


def scene_sdf(spec: SynthSceneSpec, pts: np.ndarray) -> np.ndarray:
    """Signed distance of the union scene (min over primitives)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    vals = np.stack([p.sdf(pts) for p in spec.primitives])
    return vals.min(axis=0)


def nearest_primitive_class(primitives: list, pts: np.ndarray) -> np.ndarray:
    """Class of the primitive whose surface is nearest to each point."""
    if not primitives:
        raise DomainError("no primitives to label against")
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dist = np.stack([np.abs(p.sdf(pts)) for p in primitives])
    pick = dist.argmin(axis=0)
    cls = np.array([p.class_id for p in primitives], dtype=np.int64)
    return cls[pick]


def _visible_from_any(spec: SynthSceneSpec, cameras: list[Camera],
                      pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """A point is visible if some camera sees it unoccluded in its image."""
    seen = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        rest = np.nonzero(~seen)[0]
        if rest.size == 0:
            break
        p = pts[rest]
        uv, z = cam.project(p)
        inside = (
            (z > 1e-9)
            & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        )
        if not inside.any():
            continue
        idx = rest[inside]
        d = pts[idx] - cam.center[None, :]
        dist = np.linalg.norm(d, axis=1)
        dirs = d / dist[:, None]
        t_hit = np.full(len(idx), np.inf)
        for prim in spec.primitives:
            t_hit = np.minimum(t_hit, prim.intersect(cam.center, dirs))
        seen[idx] = t_hit >= dist * (1.0 - 1e-9) - tol
    return seen


def sample_surface_points(spec: SynthSceneSpec, cameras: list[Camera], n: int,
                          seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(points, class labels): visible surface samples, area-proportional."""
    rng = np.random.default_rng(seed)
    samplable = [p for p in spec.primitives if not isinstance(p, Plane)]
    # only horizontal planes are sampled, over their in-bounds rectangle
    planes = [p for p in spec.primitives if isinstance(p, Plane) and p.normal[2] != 0]
    plane_area = spec.extent * spec.extent
    weights = np.array([p.area() for p in samplable] + [plane_area] * len(planes))
    if weights.size == 0:
        raise DomainError("no samplable primitive surface")
    weights = weights / weights.sum()

    pts_out, cls_out = [], []
    need = n
    lo = np.asarray(spec.bounds_min)
    while need > 0:
        batch = max(2 * need, 64)
        counts = rng.multinomial(batch, weights)
        chunks, chunk_cls = [], []
        for p, c in zip(samplable, counts[: len(samplable)]):
            if c == 0:
                continue
            chunks.append(p.sample_surface(rng, int(c)))
            chunk_cls.append(np.full(int(c), p.class_id, dtype=np.int64))
        for p, c in zip(planes, counts[len(samplable):]):
            if c == 0:
                continue
            xy = rng.uniform(0.0, spec.extent, size=(int(c), 2)) + lo[None, :2]
            z = (p.offset - xy @ p.normal[:2])[:, None] / p.normal[2]
            chunks.append(np.concatenate([xy, z], axis=1))
            chunk_cls.append(np.full(int(c), p.class_id, dtype=np.int64))
        cand = np.concatenate(chunks, axis=0)
        cand_cls = np.concatenate(chunk_cls, axis=0)
        # drop points buried inside another primitive, then occluded ones
        sd = np.stack([q.sdf(cand) for q in spec.primitives]).min(axis=0)
        free = sd > -1e-9
        cand, cand_cls = cand[free], cand_cls[free]
        vis = _visible_from_any(spec, cameras, cand)
        cand, cand_cls = cand[vis], cand_cls[vis]
        take = min(need, len(cand))
        pts_out.append(cand[:take])
        cls_out.append(cand_cls[:take])
        need -= take
    return np.concatenate(pts_out, axis=0), np.concatenate(cls_out, axis=0)


def render_feature_map(classmap: np.ndarray, hit: np.ndarray,
                       prototypes: np.ndarray, noise_sigma: float,
                       rng: np.random.Generator) -> ImagePlane:
    """Per-pixel class prototype plus Gaussian noise; background uses the
    trailing prototype row."""
    h, w = classmap.shape
    d = prototypes.shape[1]
    cls = np.where(hit, classmap, prototypes.shape[0] - 1)
    feat = prototypes[cls.reshape(-1)].reshape(h, w, d).astype(np.float64)
    feat = feat + noise_sigma * rng.standard_normal((h, w, d))
    return ImagePlane(feat.astype(np.float32))
