"""Pipeline stages shared by the CLI and the test suite.

synth: write a synthetic scene directory with analytic ground truth.
build: integrate TSDF per level, blend, voxelize the truncation band.
stitch: reconstruct full feature maps from crops, then denoise.
fuse:  render per-view depth, ray cast the mesh, volume-fuse features.
query / transfer / eval: retrieval, point labeling, and metrics.
"""

from __future__ import annotations

import os

import numpy as np

from . import feat2d, query as query_mod
from .camera import Camera
from .config import PipelineConfig
from .errors import DataError, DomainError
from .fuse3d import FuseStats, FusionConfig, ViewBundle, fuse
from .geomreg import normal_loss, patch_depth_loss
from .grid import CORNER_OFFSETS, SparseVoxelGrid
from .image import ImagePlane
from .ply import save_mesh_ply, save_points_ply
from .render import raycast_mesh_depth, render
from .scene import Scene, load_scene, save_manifest
from .synth import (
    SynthSceneSpec,
    class_prototypes,
    nearest_primitive_class,
    orbit_cameras,
    render_feature_map,
    sample_surface_points,
    scene_raycast,
)
from .tsdf import TsdfField, TriangleMesh, blend_multilevel, extract_mesh, integrate_depth

GRID_FILE = "grid.lesv"
TSDF_FILE = "tsdf_blended.npz"
MESH_FILE = "mesh.ply"


# -- synth --------------------------------------------------------------------


def write_synth_scene(spec: SynthSceneSpec, seed: int, out_dir: str,
                      n_gt_points: int = 10000, emit_crops: bool = False,
                      crop_size: int = 64) -> str:
    """Generate and write a synthetic scene; returns the directory."""
    os.makedirs(out_dir, exist_ok=True)
    cams = orbit_cameras(spec)
    protos = class_prototypes(spec, seed)
    rng = np.random.default_rng(seed + 1)

    views = []
    for i, cam in enumerate(cams):
        z, cls, normals, hit = scene_raycast(spec, cam)
        depth = ImagePlane(np.where(hit, z, 0.0).astype(np.float32), hit)
        feat = render_feature_map(cls, hit, protos, spec.noise_sigma, rng)
        normal = ImagePlane(
            np.where(hit[:, :, None], normals, 0.0).astype(np.float32), hit
        )
        classmap = ImagePlane(
            np.where(hit, cls, 0).astype(np.float32), hit
        )
        entry = {
            "depth": f"depth_{i:03d}.limg",
            "normal": f"normal_{i:03d}.limg",
            "classmap": f"classmap_{i:03d}.limg",
        }
        depth.save(os.path.join(out_dir, entry["depth"]))
        normal.save(os.path.join(out_dir, entry["normal"]))
        classmap.save(os.path.join(out_dir, entry["classmap"]))
        if emit_crops:
            crops = feat2d.make_crops(feat, crop_size)
            rows = []
            for j, c in enumerate(crops):
                rel = f"crop_{i:03d}_{j:03d}.limg"
                ImagePlane(c.feature).save(os.path.join(out_dir, rel))
                rows.append((c.anchor_x, c.anchor_y, c.width, c.height, rel))
            entry["crops"] = f"crops_{i:03d}.txt"
            feat2d.save_crop_manifest(os.path.join(out_dir, entry["crops"]), rows)
        else:
            entry["feature"] = f"feat_{i:03d}.limg"
            feat.save(os.path.join(out_dir, entry["feature"]))
        views.append(entry)

    emb_entries = []
    for cid, name in enumerate(spec.classes):
        rel = f"emb_{cid:02d}.emb"
        query_mod.save_embedding(os.path.join(out_dir, rel), protos[cid])
        emb_entries.append((name, rel))
    query_mod.save_embedding_manifest(
        os.path.join(out_dir, "embeddings.tsv"), emb_entries
    )

    pts, labels = sample_surface_points(spec, cams, n_gt_points, seed + 2)
    with open(os.path.join(out_dir, "gt_points.tsv"), "w") as f:
        for p, c in zip(pts, labels):
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(c)}\n")

    manifest = {
        "format": "voxfuse-scene",
        "version": 1,
        "feature_dim": spec.embed_dim,
        "bounds_min": list(spec.bounds_min),
        "extent": spec.extent,
        "classes": list(spec.classes),
        "cameras": [
            {
                "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
                "world_from_camera": c.world_from_camera_matrix().tolist(),
            }
            for c in cams
        ],
        "views": views,
        "embeddings": "embeddings.tsv",
        "primitives": [p.to_dict() for p in spec.primitives],
        "gt_points": "gt_points.tsv",
    }
    save_manifest(out_dir, manifest)
    return out_dir


# -- build --------------------------------------------------------------------


def densities_from_phi(phi: np.ndarray, observed: np.ndarray, edge: float,
                       peak_scale: float, sharpness: float) -> np.ndarray:
    """Map TSDF values to corner densities: opaque behind the zero set,
    transparent in free space. Unobserved corners are transparent."""
    from scipy.special import expit

    sig = (peak_scale / edge) * expit(-np.where(observed, phi, np.inf)
                                      / (sharpness * edge))
    return np.where(observed, sig, 0.0)


def build_grid(scene: Scene, cfg: PipelineConfig, threads: int = 1,
               ) -> tuple[SparseVoxelGrid, TsdfField]:
    """TSDF-integrate all views per level, blend, and voxelize the band."""
    level = cfg.tsdf.level
    edge = scene.extent / (1 << level)
    trunc = cfg.tsdf.trunc_scale * edge
    fine = TsdfField(level, trunc, scene.bounds_min, scene.extent)
    for cam, depth in zip(scene.cameras, scene.depths):
        integrate_depth(fine, cam, depth)
    coarse_fields = []
    for cl in cfg.tsdf.coarse_levels:
        if cl >= level:
            raise DataError(f"coarse level {cl} not coarser than fine {level}")
        cedge = scene.extent / (1 << cl)
        cf = TsdfField(cl, cfg.tsdf.trunc_scale * cedge, scene.bounds_min, scene.extent)
        for cam, depth in zip(scene.cameras, scene.depths):
            integrate_depth(cf, cam, depth)
        coarse_fields.append(cf)
    blended = (
        blend_multilevel(fine, coarse_fields, cfg.tsdf.tau_q, cfg.tsdf.temperature)
        if coarse_fields
        else fine
    )

    phi_d, obs_d = blended.volume()
    n = blended.n
    in_band = obs_d & (np.abs(np.nan_to_num(phi_d, nan=np.inf)) < trunc)
    active = np.zeros((n - 1, n - 1, n - 1), dtype=bool)
    for dx, dy, dz in CORNER_OFFSETS:
        active |= in_band[dz : dz + n - 1, dy : dy + n - 1, dx : dx + n - 1]
    cells_zyx = np.argwhere(active)
    if len(cells_zyx) == 0:
        raise DomainError("no voxel intersects the truncation band")
    cells = cells_zyx[:, ::-1]  # (ix, iy, iz)

    dens = np.empty((len(cells), 8), dtype=np.float64)
    sigma = densities_from_phi(
        phi_d, obs_d, edge, cfg.tsdf.density_peak_scale, cfg.tsdf.density_sharpness
    )
    for j, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        dens[:, j] = sigma[cells_zyx[:, 0] + dz, cells_zyx[:, 1] + dy,
                           cells_zyx[:, 2] + dx]
    grid = SparseVoxelGrid(scene.bounds_min, scene.extent)
    grid.insert_cells(level, cells, dens.astype(np.float32))
    return grid, blended


def save_tsdf(path, field: TsdfField):
    np.savez_compressed(
        path,
        level=field.level,
        trunc=field.trunc,
        bounds_min=field.bounds_min,
        extent=field.extent,
        phi=field.phi,
        weight=field.weight,
    )


def load_tsdf(path) -> TsdfField:
    if not os.path.isfile(path):
        raise DataError(f"missing TSDF file {path}")
    z = np.load(path)
    field = TsdfField(
        int(z["level"]), float(z["trunc"]), z["bounds_min"], float(z["extent"])
    )
    field.phi = z["phi"].astype(np.float32)
    field.weight = z["weight"].astype(np.float32)
    return field


# -- stitch -------------------------------------------------------------------


def stitch_scene(scene_root: str, cfg: PipelineConfig) -> int:
    """Blend per-view crops into full feature maps and denoise them.

    Rewrites the manifest with direct feature references; returns the
    number of stitched views.
    """
    import json

    scene = load_scene(scene_root)
    man_path = os.path.join(scene_root, "manifest.json")
    with open(man_path) as f:
        manifest = json.load(f)
    n_done = 0
    for i, crop_path in enumerate(scene.crop_manifests):
        if crop_path is None:
            continue
        rows = feat2d.load_crop_manifest(crop_path)
        crops = []
        for ax, ay, w, h, rel in rows:
            img = ImagePlane.load(os.path.join(scene_root, rel))
            vals = img.values if img.values.ndim == 3 else img.values[:, :, None]
            if (vals.shape[1], vals.shape[0]) != (w, h):
                raise DataError(f"{rel}: crop size differs from manifest row")
            crops.append(feat2d.CropFeature(ax, ay, vals))
        cam = scene.cameras[i]
        blended = feat2d.gaussian_window_blend(
            crops, cam.width, cam.height, cfg.stitch.sigma_g, cfg.stitch.eps
        )
        cleaned = feat2d.scga(feat2d.scra(blended, cfg.attention), cfg.attention)
        rel = f"feat_{i:03d}.limg"
        cleaned.save(os.path.join(scene_root, rel))
        manifest["views"][i].pop("crops", None)
        manifest["views"][i]["feature"] = rel
        n_done += 1
    save_manifest(scene_root, manifest)
    return n_done


# -- fuse ---------------------------------------------------------------------


def make_view_bundles(grid: SparseVoxelGrid, scene: Scene, mesh: TriangleMesh,
                      cfg: PipelineConfig, threads: int = 1) -> list[ViewBundle]:
    bundles = []
    for i, cam in enumerate(scene.cameras):
        if scene.features[i] is None:
            raise DataError(
                f"view {i} has crops, not features; run the stitch stage first"
            )
        res = render(
            grid, cam, cfg.render.samples_per_interval,
            cfg.render.alpha_valid_min, threads,
        )
        d_mesh = raycast_mesh_depth(mesh, cam, threads)
        bundles.append(
            ViewBundle(cam, scene.features[i], res.depth, d_mesh)
        )
    return bundles


def fusion_config(scene: Scene, cfg: PipelineConfig) -> FusionConfig:
    edge = scene.extent / (1 << cfg.tsdf.level)
    return FusionConfig(
        beta=cfg.fuse.beta_scale * edge,
        sigma_c=cfg.fuse.sigma_c_scale * edge,
        eps=cfg.fuse.eps,
        occlusion_margin=cfg.fuse.margin_scale * edge,
        batch_size=cfg.fuse.batch_size,
    )


def fuse_scene(grid: SparseVoxelGrid, scene: Scene, mesh: TriangleMesh,
               cfg: PipelineConfig, threads: int = 1) -> FuseStats:
    bundles = make_view_bundles(grid, scene, mesh, cfg, threads)
    return fuse(grid, bundles, fusion_config(scene, cfg), threads)


# -- query / transfer / eval ---------------------------------------------------


def eval_universe(scene: Scene, grid: SparseVoxelGrid, cfg: PipelineConfig,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """(universe, labels) for voxel-level retrieval evaluation.

    The universe is the fused voxels whose centers lie within
    ``query.surface_shell`` voxel edges of the analytic scene surface;
    labels come from the nearest primitive.
    """
    if not scene.primitives:
        raise DataError("scene manifest carries no primitives for ground truth")
    centers = grid.centers()
    labels = nearest_primitive_class(scene.primitives, centers)
    sdf = np.stack([p.sdf(centers) for p in scene.primitives]).min(axis=0)
    edge = scene.extent / (1 << cfg.tsdf.level)
    universe = grid.fused_mask & (np.abs(sdf) <= cfg.query.surface_shell * edge)
    return universe, labels


def gt_voxel_mask(scene: Scene, grid: SparseVoxelGrid, class_id: int) -> np.ndarray:
    """Analytic per-voxel ground truth over fused voxels (full band)."""
    if not scene.primitives:
        raise DataError("scene manifest carries no primitives for ground truth")
    labels = nearest_primitive_class(scene.primitives, grid.centers())
    return (labels == class_id) & grid.fused_mask


def run_query(grid: SparseVoxelGrid, scene: Scene, cfg: PipelineConfig,
              out_dir: str, labels: list[str] | None = None,
              render_view: int | None = None, threads: int = 1) -> list[dict]:
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for emb in scene.embeddings:
        if labels and emb.label not in labels:
            continue
        result = query_mod.relevance(grid, emb)
        idx, centers = query_mod.mask3d(grid, result, cfg.query.threshold)
        stem = emb.label.replace(" ", "_")
        query_mod.save_mask_keys(os.path.join(out_dir, f"mask_{stem}.txt"), grid, idx)
        save_points_ply(os.path.join(out_dir, f"mask_{stem}.ply"), centers)
        row = {"label": emb.label, "voxels": int(len(idx))}
        if render_view is not None:
            cam = scene.cameras[render_view]
            rel = query_mod.render_relevance(
                grid, result, cam, cfg.render.samples_per_interval, threads
            )
            rel.save(os.path.join(out_dir, f"relevance_{stem}.limg"))
            rel.to_png(os.path.join(out_dir, f"relevance_{stem}.png"), 0.0, 1.0)
        rows.append(row)
    return rows


def run_transfer(grid: SparseVoxelGrid, scene: Scene, cfg: PipelineConfig,
                 out_dir: str) -> dict:
    if scene.gt_points is None:
        raise DataError("scene has no ground-truth points")
    os.makedirs(out_dir, exist_ok=True)
    probs, labels = query_mod.transfer_pointcloud(
        grid, scene.gt_points, scene.embeddings, cfg.query.knn
    )
    with open(os.path.join(out_dir, "transfer_labels.tsv"), "w") as f:
        for p, c in zip(scene.gt_points, labels):
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(c)}\n")
    palette = _class_palette(len(scene.embeddings))
    save_points_ply(
        os.path.join(out_dir, "transfer_points.ply"),
        scene.gt_points,
        palette[labels],
    )
    gt = scene.gt_point_labels
    per_class = []
    for cid, emb in enumerate(scene.embeddings):
        m = query_mod.metrics(labels == cid, gt == cid)
        m["label"] = emb.label
        per_class.append(m)
    agg = query_mod.aggregate(per_class)
    agg["accuracy"] = float(np.mean(labels == gt))
    return {"per_class": per_class, "aggregate": agg}


def _class_palette(n: int) -> np.ndarray:
    base = np.array(
        [[0.9, 0.1, 0.1], [0.1, 0.7, 0.1], [0.15, 0.3, 0.9],
         [0.9, 0.8, 0.1], [0.8, 0.2, 0.8], [0.1, 0.8, 0.8]]
    )
    reps = int(np.ceil(n / len(base)))
    return np.tile(base, (reps, 1))[:n]


def run_eval(grid: SparseVoxelGrid, scene: Scene, mesh: TriangleMesh,
             cfg: PipelineConfig, out_dir: str, loc_view: int = 0,
             threads: int = 1) -> dict:
    """Retrieval metrics vs analytic labels, geometric losses, transfer."""
    os.makedirs(out_dir, exist_ok=True)
    class_of_label = {name: cid for cid, name in enumerate(scene.classes)}
    universe, vox_labels = eval_universe(scene, grid, cfg)
    rows = []
    for emb in scene.embeddings:
        cid = class_of_label.get(emb.label)
        if cid is None:
            continue
        result = query_mod.relevance(grid, emb)
        query_mod.mask3d(grid, result, cfg.query.threshold)
        gt = universe & (vox_labels == cid)
        row = query_mod.metrics(result.mask & universe, gt)
        row["label"] = emb.label
        if scene.classmaps[loc_view] is not None:
            rel = query_mod.render_relevance(
                grid, result, scene.cameras[loc_view],
                cfg.render.samples_per_interval, threads,
            )
            flat = np.argmax(rel.values)
            py, px = np.unravel_index(flat, rel.values.shape)
            cm = scene.classmaps[loc_view]
            row["loc_hit"] = bool(
                cm.valid[py, px] and int(cm.values[py, px]) == cid
            )
        rows.append(row)
    summary = query_mod.aggregate(rows) if rows else {}

    d_losses, n_losses = [], []
    for i, cam in enumerate(scene.cameras):
        res = render(grid, cam, cfg.render.samples_per_interval,
                     cfg.render.alpha_valid_min, threads)
        try:
            d_losses.append(patch_depth_loss(res.depth, scene.depths[i], cfg.patch))
        except DomainError:
            pass
        if scene.normals[i] is not None:
            try:
                n_losses.append(normal_loss(res.normal, scene.normals[i]))
            except DomainError:
                pass
    if d_losses:
        summary["patch_depth_loss"] = float(np.mean(d_losses))
    if n_losses:
        summary["normal_loss"] = float(np.mean(n_losses))

    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write("label,iou,acc25,loc_hit\n")
        for r in rows:
            loc = r.get("loc_hit", "")
            f.write(
                f"{r['label']},{r['iou']!r},{int(bool(r['acc25_hit']))},"
                f"{int(bool(loc)) if loc != '' else ''}\n"
            )
    import json

    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"rows": rows, "summary": summary}
