"""Scene directory: a JSON manifest referencing per-view binary maps,
query embeddings, analytic ground truth, and camera poses.

``load_scene`` materializes and validates everything up front so later
pipeline stages can assume consistent inputs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import DataError, DomainError
from .image import ImagePlane
from .query import QueryEmbedding, load_embedding, load_embedding_manifest
from .synth import primitive_from_dict

MANIFEST_NAME = "manifest.json"


@dataclass
class Scene:
    root: str
    bounds_min: np.ndarray
    extent: float
    feature_dim: int
    classes: list[str]
    cameras: list[Camera]
    depths: list[ImagePlane]
    features: list[ImagePlane | None]
    crop_manifests: list[str | None]
    normals: list[ImagePlane | None]
    classmaps: list[ImagePlane | None]
    embeddings: list[QueryEmbedding] = field(default_factory=list)
    primitives: list = field(default_factory=list)
    gt_points: np.ndarray | None = None
    gt_point_labels: np.ndarray | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def save_manifest(root: str, manifest: dict):
    with open(os.path.join(root, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(cond: bool, msg: str):
    if not cond:
        raise DataError(msg)


def load_scene(root: str) -> Scene:
    """Parse and validate a scene directory; errors carry file context."""
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"missing manifest: {path}")
    with open(path) as f:
        try:
            m = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    _require(m.get("format") == "voxfuse-scene", f"{path}: not a scene manifest")
    bounds_min = np.asarray(m["bounds_min"], dtype=np.float64)
    extent = float(m["extent"])
    feature_dim = int(m["feature_dim"])
    classes = list(m.get("classes", []))

    cameras = []
    for i, c in enumerate(m["cameras"]):
        try:
            cam = Camera.from_matrix(
                float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                int(c["width"]), int(c["height"]), np.asarray(c["world_from_camera"]),
            )
        except DomainError as exc:
            raise DataError(f"{path}: camera {i}: {exc}") from exc
        cameras.append(cam)

    views = m["views"]
    _require(len(views) == len(cameras), f"{path}: view/camera count mismatch")

    def load_img(rel: str, what: str, view: int) -> ImagePlane:
        p = os.path.join(root, rel)
        if not os.path.isfile(p):
            raise DataError(f"{path}: view {view}: missing {what} file {rel}")
        return ImagePlane.load(p)

    depths, feats, crops, normals, classmaps = [], [], [], [], []
    for i, v in enumerate(views):
        depth = load_img(v["depth"], "depth", i)
        if (depth.width, depth.height) != (cameras[i].width, cameras[i].height):
            raise DataError(f"{path}: view {i}: depth size differs from camera")
        depths.append(depth)
        if "feature" in v:
            fm = load_img(v["feature"], "feature", i)
            if fm.channels != feature_dim:
                raise DataError(
                    f"{path}: view {i}: feature dim {fm.channels} != "
                    f"manifest dim {feature_dim} (file {v['feature']})"
                )
            feats.append(fm)
            crops.append(None)
        elif "crops" in v:
            p = os.path.join(root, v["crops"])
            if not os.path.isfile(p):
                raise DataError(f"{path}: view {i}: missing crop manifest {v['crops']}")
            feats.append(None)
            crops.append(p)
        else:
            raise DataError(f"{path}: view {i}: needs 'feature' or 'crops'")
        normals.append(load_img(v["normal"], "normal", i) if "normal" in v else None)
        classmaps.append(load_img(v["classmap"], "classmap", i) if "classmap" in v else None)

    embeddings = []
    if m.get("embeddings"):
        man = os.path.join(root, m["embeddings"])
        if not os.path.isfile(man):
            raise DataError(f"{path}: missing embeddings manifest {m['embeddings']}")
        for label, rel in load_embedding_manifest(man):
            p = os.path.join(root, rel)
            if not os.path.isfile(p):
                raise DataError(f"{man}: missing embedding file {rel}")
            vec = load_embedding(p)
            if vec.size != feature_dim:
                raise DataError(
                    f"{man}: embedding '{label}' dim {vec.size} != {feature_dim}"
                )
            embeddings.append(QueryEmbedding(vec, label))

    primitives = [primitive_from_dict(d) for d in m.get("primitives", [])]

    gt_points = gt_labels = None
    if m.get("gt_points"):
        p = os.path.join(root, m["gt_points"])
        if not os.path.isfile(p):
            raise DataError(f"{path}: missing ground-truth points {m['gt_points']}")
        rows = np.loadtxt(p, dtype=np.float64, ndmin=2)
        if rows.size and rows.shape[1] != 4:
            raise DataError(f"{p}: expected rows of 'x y z class'")
        gt_points = rows[:, :3]
        gt_labels = rows[:, 3].astype(np.int64)

    return Scene(
        root=root,
        bounds_min=bounds_min,
        extent=extent,
        feature_dim=feature_dim,
        classes=classes,
        cameras=cameras,
        depths=depths,
        features=feats,
        crop_manifests=crops,
        normals=normals,
        classmaps=classmaps,
        embeddings=embeddings,
        primitives=primitives,
        gt_points=gt_points,
        gt_point_labels=gt_labels,
    )
