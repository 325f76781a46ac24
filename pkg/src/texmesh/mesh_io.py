"""Wavefront OBJ reader/writer with optional UVs and per-vertex RGB.

Per-vertex colour uses the common ``v x y z r g b`` extension.  UVs are
written one per vertex and faces reference them with ``f a/a b/b c/c``.
"""
from __future__ import annotations

import numpy as np

from .geometry import Mesh


def write_obj(path, mesh: Mesh) -> None:
    v = np.asarray(mesh.vertices, dtype=np.float64)
    f = np.asarray(mesh.faces, dtype=np.int64)
    colors = None if mesh.colors is None else np.asarray(mesh.colors, dtype=np.float64)
    uv = None if mesh.uv is None else np.asarray(mesh.uv, dtype=np.float64)
    if colors is not None and colors.shape != v.shape:
        raise ValueError("colors must be (V, 3)")
    if uv is not None and uv.shape != (len(v), 2):
        raise ValueError("uv must be (V, 2)")
    lines = []
    for i, p in enumerate(v):
        s = f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if colors is not None:
            c = colors[i]
            s += f" {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
        lines.append(s)
    if uv is not None:
        lines += [f"vt {t[0]:.9g} {t[1]:.9g}" for t in uv]
    for a, b, c in f + 1:
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}" if uv is not None else f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    """Read vertices, triangular faces (polygons are fanned), colours and UVs."""
    verts, cols, uvs, faces, face_uv = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                nums = [float(x) for x in parts[1:]]
                verts.append(nums[:3])
                if len(nums) >= 6:
                    cols.append(nums[3:6])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                idx, tix = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    idx.append(_resolve(int(fields[0]), len(verts)))
                    if len(fields) > 1 and fields[1]:
                        tix.append(_resolve(int(fields[1]), len(uvs)))
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
                    if len(tix) == len(idx):
                        face_uv.append([tix[0], tix[k], tix[k + 1]])
    if not verts:
        raise ValueError(f"{path}: no vertices")
    v = np.array(verts, dtype=np.float64)
    colors = np.array(cols) if len(cols) == len(verts) else None
    uv = None
    if uvs and len(face_uv) == len(faces):
        # per-vertex UV when each vertex maps to a single texture coordinate
        uv = np.zeros((len(v), 2))
        tv = np.array(uvs)
        uv[np.array(faces).reshape(-1)] = tv[np.array(face_uv).reshape(-1)]
    return Mesh(v, np.array(faces, dtype=np.int64).reshape(-1, 3), uv, colors)


def _resolve(i: int, n: int) -> int:
    return i - 1 if i > 0 else n + i
