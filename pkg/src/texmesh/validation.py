"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .dataio import Record
from .geometry import Mesh


def check_images(X, stride: int | None = None, size: int | None = None) -> np.ndarray:
    """Return ``X`` as an (N, H, W, 3) array (uint8 kept, floats checked in [0, 1])."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no images given")
    if arr.dtype != np.uint8:
        arr = arr.astype(np.float64)
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise ValueError("float images must be finite and lie in [0, 1]")
    if stride is not None and (arr.shape[1] % stride or arr.shape[2] % stride):
        raise ValueError(f"image size {arr.shape[1:3]} is not divisible by the stride {stride}")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ValueError(f"images must be {size}x{size}, got {arr.shape[1]}x{arr.shape[2]}")
    return arr


def check_records(y, n: int | None = None) -> list[Record]:
    recs = list(y)
    if not all(isinstance(r, Record) for r in recs):
        raise TypeError("targets must be dataio.Record instances")
    if n is not None and len(recs) != n:
        raise ValueError(f"got {len(recs)} records for {n} images")
    return recs


def check_meshes(meshes) -> list[Mesh]:
    out = list(meshes)
    if not out:
        raise ValueError("need at least one mesh")
    for m in out:
        if not isinstance(m, Mesh):
            raise TypeError("expected geometry.Mesh instances")
        if len(m.vertices) == 0 or len(m.faces) == 0:
            raise ValueError("empty mesh")
        if not np.isfinite(m.vertices).all():
            raise ValueError("mesh has non-finite vertices")
        if m.faces.min() < 0 or m.faces.max() >= len(m.vertices):
            raise ValueError("face index out of range")
    return out


def check_latents(Z, dim: int) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != dim:
        raise ValueError(f"latents must have {dim} columns, got {Z.shape[1]}")
    if not np.isfinite(Z).all():
        raise ValueError("latents must be finite")
    return Z
