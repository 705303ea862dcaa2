"""Minimal PLY writers for meshes and point clouds (ascii + binary LE)."""

from __future__ import annotations

import numpy as np


def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh_ply(path, mesh, binary: bool = True):
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    normals = mesh.normals
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(verts)}")
    header += ["property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append(f"element face {len(tris)}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")
    vdata = verts if normals is None else np.concatenate(
        [verts, np.asarray(normals, dtype=np.float64)], axis=1
    )
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(vdata.astype("<f4").tobytes())
            if len(tris):
                rec = np.empty(len(tris), dtype=[("n", "u1"), ("idx", "<i4", 3)])
                rec["n"] = 3
                rec["idx"] = tris.astype("<i4")
                f.write(rec.tobytes())
        else:
            lines = []
            for row in vdata:
                lines.append(" ".join(_fmt(v) for v in row))
            for t in tris:
                lines.append("3 " + " ".join(str(int(i)) for i in t))
            f.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def save_points_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
                    binary: bool = True):
    """Point cloud writer; colors are float RGB in [0,1], stored as uchar."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(points)}")
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if colors is None:
                f.write(points.astype("<f4").tobytes())
            else:
                rec = np.empty(len(points), dtype=[("p", "<f4", 3), ("c", "u1", 3)])
                rec["p"] = points.astype("<f4")
                rec["c"] = np.clip(colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
                f.write(rec.tobytes())
        else:
            lines = []
            for i, p in enumerate(points):
                row = " ".join(_fmt(v) for v in p)
                if colors is not None:
                    c = np.clip(colors[i] * 255.0 + 0.5, 0, 255).astype(int)
                    row += " " + " ".join(str(v) for v in c)
                lines.append(row)
            f.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
