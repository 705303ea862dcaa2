"""Open-vocabulary queries against the fused grid.

Relevance is cosine similarity between fused voxel features and a query
embedding, min-max normalized over fused voxels so one threshold works
across queries with different score ranges. Unfused voxels never enter
normalization, masks, or nearest-neighbor candidate sets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .errors import DataError, DomainError
from .grid import SparseVoxelGrid, VoxelKey
from .image import ImagePlane
from .render import composite_scalar


@dataclass
class QueryEmbedding:
    vector: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(self.vector)
        if not np.isfinite(n) or n == 0:
            raise DomainError(f"query embedding '{self.label}' must have non-zero norm")


@dataclass
class QueryResult:
    raw: np.ndarray  # (N,) cosine scores; 0 at unfused voxels
    normalized: np.ndarray  # (N,) min-max over fused voxels; 0 at unfused
    fused: np.ndarray  # (N,) bool
    label: str = ""
    threshold: float | None = None
    mask: np.ndarray | None = None  # (N,) bool, set by mask3d


def relevance(grid: SparseVoxelGrid, q: QueryEmbedding) -> QueryResult:
    """Raw + normalized cosine scores over fused voxels (no mask yet)."""
    if grid.features is None:
        raise DomainError("grid has no fused features")
    if grid.feature_dim != q.vector.size:
        raise DomainError(
            f"feature dim {grid.feature_dim} != query dim {q.vector.size}"
        )
    fused = grid.fused_mask
    if not fused.any():
        raise DomainError("no fused voxel to query")
    feats = grid.features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    qv = q.vector / np.linalg.norm(q.vector)
    raw = np.zeros(len(grid))
    ok = fused & (norms > 0)
    raw[ok] = (feats[ok] @ qv) / norms[ok]
    lo = raw[fused].min()
    hi = raw[fused].max()
    normalized = np.zeros(len(grid))
    if hi > lo:
        normalized[fused] = (raw[fused] - lo) / (hi - lo)
    else:
        normalized[fused] = 0.5
    return QueryResult(raw=raw, normalized=normalized, fused=fused, label=q.label)


def mask3d(grid: SparseVoxelGrid, result: QueryResult,
           threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Select fused voxels with normalized score >= threshold.

    Returns (indices, voxel centers); also records mask and threshold on
    the result.
    """
    if not (0.0 <= threshold <= 1.0):
        raise DomainError("threshold must lie in [0, 1]")
    mask = result.fused & (result.normalized >= threshold)
    result.mask = mask
    result.threshold = float(threshold)
    idx = np.nonzero(mask)[0]
    return idx, grid.centers()[idx]


def render_relevance(grid: SparseVoxelGrid, result: QueryResult, camera: Camera,
                     samples_per_interval: int = 1, threads: int = 1) -> ImagePlane:
    """Alpha-composite normalized scores exactly like color (one channel)."""
    scores = np.where(result.fused, result.normalized, 0.0)
    return composite_scalar(grid, camera, scores, samples_per_interval, threads)


def transfer_pointcloud(grid: SparseVoxelGrid, points: np.ndarray,
                        class_embeddings: list[QueryEmbedding], k: int = 8,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Label points from the K nearest fused voxels.

    Per candidate voxel, class logits are cosines against each class
    embedding, softmaxed to probabilities; the point's class scores are
    the exp(-d^2/2)-weighted average over candidates. Returns
    (probabilities (P, C), labels (P,)).
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    if not class_embeddings:
        raise DomainError("no class embeddings")
    if grid.features is None or not grid.fused_mask.any():
        raise DomainError("grid has no fused voxel")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fused_idx = np.nonzero(grid.fused_mask)[0]
    centers = grid.centers()[fused_idx]
    feats = grid.features[fused_idx].astype(np.float64)
    fnorm = np.linalg.norm(feats, axis=1)
    fnorm = np.where(fnorm == 0, 1.0, fnorm)
    evecs = np.stack([e.vector / np.linalg.norm(e.vector) for e in class_embeddings])
    logits = (feats / fnorm[:, None]) @ evecs.T  # (M, C)
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    probs_vox = ex / ex.sum(axis=1, keepdims=True)

    kk = min(k, len(fused_idx))
    tree = cKDTree(centers)
    dist, nn = tree.query(points, k=kk)
    if kk == 1:
        dist = dist[:, None]
        nn = nn[:, None]
    w = np.exp(-0.5 * dist * dist)
    wsum = w.sum(axis=1, keepdims=True)
    wsum = np.where(wsum == 0, 1.0, wsum)
    probs = np.einsum("pk,pkc->pc", w / wsum, probs_vox[nn])
    return probs, probs.argmax(axis=1)


def metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> dict:
    """IoU and Acc@25 hit of two boolean masks over a common universe."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise DomainError("mask universes differ")
    inter = int(np.count_nonzero(pred_mask & gt_mask))
    union = int(np.count_nonzero(pred_mask | gt_mask))
    iou = 1.0 if union == 0 else inter / union
    gt_size = int(np.count_nonzero(gt_mask))
    return {
        "iou": iou,
        "acc25_hit": iou >= 0.25,
        "intersection": inter,
        "union": union,
        "gt_size": gt_size,
        "pred_size": int(np.count_nonzero(pred_mask)),
        "recall": (inter / gt_size) if gt_size else 1.0,
    }


def aggregate(rows: list[dict]) -> dict:
    """miou/acc25 over rows; macc from per-row recall; loc_acc from loc_hit."""
    if not rows:
        raise DomainError("no metric rows to aggregate")
    out = {
        "miou": float(np.mean([r["iou"] for r in rows])),
        "acc25": float(np.mean([bool(r["acc25_hit"]) for r in rows])),
    }
    if all("recall" in r for r in rows):
        out["macc"] = float(np.mean([r["recall"] for r in rows]))
    loc = [r["loc_hit"] for r in rows if "loc_hit" in r]
    if loc:
        out["loc_acc"] = float(np.mean([bool(h) for h in loc]))
    return out


def edit_voxels(grid: SparseVoxelGrid, keys: list[VoxelKey], new_color) -> SparseVoxelGrid:
    """Replace SH color coefficients of the masked voxels in place.

    ``new_color`` is (3,) for the DC band (higher bands zeroed) or a full
    (sh_coeffs, 3) block. Geometry and features stay untouched.
    """
    new_color = np.asarray(new_color, dtype=np.float32)
    if new_color.shape == (3,):
        block = np.zeros((grid.sh_coeffs, 3), dtype=np.float32)
        block[0] = new_color
    elif new_color.shape == (grid.sh_coeffs, 3):
        block = new_color
    else:
        raise DomainError("new_color must be (3,) or (sh_coeffs, 3)")
    if np.any(block < 0) or np.any(block > 1):
        raise DomainError("color coefficients must lie in [0, 1]")
    for key in keys:
        grid.colors[grid.index_of(key)] = block
    return grid


# -- embedding files ----------------------------------------------------------


def save_embedding(path, vector: np.ndarray):
    """Plain binary vector: u32 dim + little-endian f32 payload."""
    vector = np.asarray(vector, dtype=np.float32).reshape(-1)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", vector.size))
        f.write(vector.astype("<f4").tobytes())


def load_embedding(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise DataError(f"{path}: truncated embedding file")
    (dim,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 4 * dim:
        raise DataError(f"{path}: embedding payload size mismatch")
    return np.frombuffer(data, "<f4", dim, 4).copy()


def save_embedding_manifest(path, entries: list[tuple[str, str]]):
    """Tab-separated rows: label <TAB> relative path."""
    with open(path, "w") as f:
        for label, rel in entries:
            f.write(f"{label}\t{rel}\n")


def load_embedding_manifest(path) -> list[tuple[str, str]]:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{ln}: expected 'label<TAB>path'")
            label, rel = line.split("\t", 1)
            rows.append((label, rel))
    return rows


def save_mask_keys(path, grid: SparseVoxelGrid, indices: np.ndarray):
    """Voxel-key list as text rows 'level code'."""
    with open(path, "w") as f:
        for i in indices:
            f.write(f"{int(grid.levels[i])} {int(grid.codes[i])}\n")


def load_mask_keys(path) -> list[VoxelKey]:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'level code'")
            out.append(VoxelKey(int(parts[0]), int(parts[1])))
    return out
