"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical-domain
error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import PipelineConfig, load_config
from .errors import DataError, DomainError, UsageError, VoxfuseError
from .grid import SparseVoxelGrid
from . import pipeline
from .ply import save_mesh_ply
from .query import edit_voxels, load_mask_keys
from .scene import load_scene
from .synth import default_five_object_spec
from .tsdf import boundary_edge_count, extract_mesh


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="voxfuse", description=__doc__)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", type=int, default=32)
    sp.add_argument("--image-size", type=int, default=128)
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--noise", type=float, default=0.3)
    sp.add_argument("--points", type=int, default=10000)
    sp.add_argument("--emit-crops", action="store_true")
    sp.add_argument("--crop-size", type=int, default=64)

    bp = sub.add_parser("build", help="TSDF integrate + blend + voxelize")
    bp.add_argument("--scene", required=True)

    mp = sub.add_parser("mesh", help="extract the blended TSDF mesh to PLY")
    mp.add_argument("--scene", required=True)
    mp.add_argument("--out", help="output PLY (default: scene/mesh.ply)")
    mp.add_argument("--ascii", action="store_true")

    tp = sub.add_parser("stitch", help="blend feature crops and denoise")
    tp.add_argument("--scene", required=True)

    fp = sub.add_parser("fuse", help="volume-fuse 2D features into the grid")
    fp.add_argument("--scene", required=True)

    qp = sub.add_parser("query", help="relevance, 3D masks, rendering, edits")
    qp.add_argument("--scene", required=True)
    qp.add_argument("--out-dir")
    qp.add_argument("--label", action="append", help="restrict to these labels")
    qp.add_argument("--threshold", type=float)
    qp.add_argument("--render-view", type=int)
    qp.add_argument("--edit-label", help="recolor this query's masked voxels")
    qp.add_argument("--edit-color", help="r,g,b in [0,1]")

    xp = sub.add_parser("transfer", help="label ground-truth points")
    xp.add_argument("--scene", required=True)
    xp.add_argument("--out-dir")
    xp.add_argument("--knn", type=int)

    ep = sub.add_parser("eval", help="retrieval metrics and geometric losses")
    ep.add_argument("--scene", required=True)
    ep.add_argument("--out-dir")
    ep.add_argument("--loc-view", type=int, default=0)
    return p


def _load_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        if not os.path.isfile(args.config):
            raise DataError(f"missing config file {args.config}")
        cfg = load_config(args.config, cfg)
    return cfg


def _scene_grid(args, need_features=False):
    scene = load_scene(args.scene)
    grid_path = os.path.join(args.scene, pipeline.GRID_FILE)
    if not os.path.isfile(grid_path):
        raise DataError(f"missing grid {grid_path}; run 'voxfuse build' first")
    grid = SparseVoxelGrid.load(grid_path)
    if need_features and grid.features is None:
        raise DataError("grid has no fused features; run 'voxfuse fuse' first")
    return scene, grid, grid_path


def _run(argv) -> int:
    args = _build_parser().parse_args(argv)
    if not args.command:
        raise UsageError("missing subcommand")
    cfg = _load_cfg(args)
    threads = max(1, args.threads)

    if args.command == "synth":
        spec = default_five_object_spec(
            n_views=args.views,
            image_size=args.image_size,
            embed_dim=args.dim,
            noise_sigma=args.noise,
        )
        spec.voxel_level = cfg.tsdf.level
        spec.coarse_levels = cfg.tsdf.coarse_levels
        out = pipeline.write_synth_scene(
            spec, args.seed, args.out, n_gt_points=args.points,
            emit_crops=args.emit_crops, crop_size=args.crop_size,
        )
        print(f"scene written to {out} ({spec.n_views} views)")
        return 0

    if args.command == "build":
        scene = load_scene(args.scene)
        grid, blended = pipeline.build_grid(scene, cfg, threads)
        grid.save(os.path.join(args.scene, pipeline.GRID_FILE))
        pipeline.save_tsdf(os.path.join(args.scene, pipeline.TSDF_FILE), blended)
        mesh = extract_mesh(blended)
        save_mesh_ply(os.path.join(args.scene, pipeline.MESH_FILE), mesh)
        print(
            f"grid: {len(grid)} voxels at level {cfg.tsdf.level}; "
            f"mesh: {len(mesh.triangles)} triangles"
        )
        return 0

    if args.command == "mesh":
        field = pipeline.load_tsdf(os.path.join(args.scene, pipeline.TSDF_FILE))
        mesh = extract_mesh(field)
        out = args.out or os.path.join(args.scene, pipeline.MESH_FILE)
        save_mesh_ply(out, mesh, binary=not args.ascii)
        if len(mesh.triangles) == 0:
            print("warning: extracted mesh is empty (no zero crossing)")
        print(
            f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} "
            f"triangles, {boundary_edge_count(mesh)} boundary edges -> {out}"
        )
        return 0

    if args.command == "stitch":
        n = pipeline.stitch_scene(args.scene, cfg)
        print(f"stitched {n} views")
        return 0

    if args.command == "fuse":
        scene, grid, grid_path = _scene_grid(args)
        field = pipeline.load_tsdf(os.path.join(args.scene, pipeline.TSDF_FILE))
        mesh = extract_mesh(field)
        stats = pipeline.fuse_scene(grid, scene, mesh, cfg, threads)
        grid.save(grid_path)
        conf = " ".join(f"{c:.3f}" for c in stats.mean_confidence)
        print(f"per-view mean confidence: {conf}")
        print(f"unfused voxel fraction: {stats.unfused_fraction:.4f}")
        return 0

    if args.command == "query":
        scene, grid, grid_path = _scene_grid(args, need_features=True)
        if args.threshold is not None:
            cfg.query.threshold = args.threshold
        out_dir = args.out_dir or os.path.join(args.scene, "queries")
        rows = pipeline.run_query(
            grid, scene, cfg, out_dir, labels=args.label,
            render_view=args.render_view, threads=threads,
        )
        for r in rows:
            print(f"{r['label']}: {r['voxels']} voxels above threshold")
        if args.edit_label:
            if not args.edit_color:
                raise UsageError("--edit-label requires --edit-color r,g,b")
            try:
                color = [float(v) for v in args.edit_color.split(",")]
            except ValueError:
                raise UsageError("--edit-color must be 'r,g,b'") from None
            stem = args.edit_label.replace(" ", "_")
            mask_file = os.path.join(out_dir, f"mask_{stem}.txt")
            if not os.path.isfile(mask_file):
                raise DataError(f"no mask for label '{args.edit_label}'")
            keys = load_mask_keys(mask_file)
            edit_voxels(grid, keys, np.asarray(color))
            grid.save(grid_path)
            print(f"recolored {len(keys)} voxels for '{args.edit_label}'")
        return 0

    if args.command == "transfer":
        scene, grid, _ = _scene_grid(args, need_features=True)
        if args.knn is not None:
            cfg.query.knn = args.knn
        out_dir = args.out_dir or os.path.join(args.scene, "transfer")
        res = pipeline.run_transfer(grid, scene, cfg, out_dir)
        agg = res["aggregate"]
        print(
            f"transfer: mAcc={agg['macc']:.4f} mIoU={agg['miou']:.4f} "
            f"accuracy={agg['accuracy']:.4f}"
        )
        return 0

    if args.command == "eval":
        scene, grid, _ = _scene_grid(args, need_features=True)
        field = pipeline.load_tsdf(os.path.join(args.scene, pipeline.TSDF_FILE))
        mesh = extract_mesh(field)
        out_dir = args.out_dir or os.path.join(args.scene, "eval")
        res = pipeline.run_eval(
            grid, scene, mesh, cfg, out_dir, loc_view=args.loc_view, threads=threads
        )
        for key, val in sorted(res["summary"].items()):
            print(f"{key}: {val:.6f}" if isinstance(val, float) else f"{key}: {val}")
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        return _run(argv if argv is not None else sys.argv[1:])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print("run 'voxfuse --help' for usage", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, VoxfuseError) as exc:
        print(f"numerical-domain error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
