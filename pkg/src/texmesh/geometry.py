"""Sphere template, deformation field, mesh distances and shape-space fitting.

A deformable mesh is the template sphere pushed through a latent-conditioned
displacement MLP and scaled per axis::

    vertex_i = s * (v_i + psi(v_i, z))

The texture parameterization lives on the *template*: every surface point keeps
the polar (u, v) of the sphere point it came from.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .diffcore import Adam, NonFiniteError, default_dtype

log = logging.getLogger(__name__)

POLE_BAND = 0.01


# --------------------------------------------------------------------------- template


@dataclass
class TemplateSphere:
    vertices: np.ndarray  # (V, 3) unit vectors
    faces: np.ndarray  # (F, 3) int
    uv: np.ndarray  # (V, 2)
    level: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.faces)


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def subdivide(vertices: np.ndarray, faces: np.ndarray):
    """Split every triangle into four, projecting new midpoints to the unit sphere."""
    edges = unique_edges(faces)
    n = len(vertices)
    mids = vertices[edges[:, 0]] + vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    key = edges[:, 0] * (n + 1) + edges[:, 1]
    order = np.argsort(key)
    skey = key[order]

    def mid(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        pos = np.searchsorted(skey, lo * (n + 1) + hi)
        return n + order[pos]

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    new_faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.concatenate([vertices, mids]), new_faces


def uv_of_point(p) -> tuple[float, float] | np.ndarray:
    """Polar texture coordinates of unit vectors.

    ``u`` is the azimuth over 2*pi wrapped into [0, 1); ``v`` is the polar
    angle from +z over pi.  Accepts a single 3-vector or an (N, 3) array.
    """
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    norm = np.linalg.norm(arr, axis=1)
    if np.any(norm == 0):
        raise ValueError("uv_of_point is undefined for the zero vector")
    q = arr / norm[:, None]
    u = np.mod(np.arctan2(q[:, 1], q[:, 0]) / (2 * np.pi), 1.0)
    v = np.arccos(np.clip(q[:, 2], -1.0, 1.0)) / np.pi
    polar = (v < POLE_BAND) | (v > 1 - POLE_BAND)
    u = np.where(polar, 0.0, u)
    u = np.where(u >= 1.0, 0.0, u)
    out = np.stack([u, v], 1)
    return (float(out[0, 0]), float(out[0, 1])) if single else out


def point_of_uv(uv) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    az = uv[:, 0] * 2 * np.pi
    pol = uv[:, 1] * np.pi
    return np.stack([np.sin(pol) * np.cos(az), np.sin(pol) * np.sin(az), np.cos(pol)], 1)


def uv_of_point_torch(p: torch.Tensor) -> torch.Tensor:
    """Differentiable polar UV of (not necessarily unit) points, shape (..., 2)."""
    r = torch.linalg.norm(p, dim=-1).clamp_min(1e-12)
    u = torch.remainder(torch.atan2(p[..., 1], p[..., 0]) / (2 * math.pi), 1.0)
    v = torch.acos((p[..., 2] / r).clamp(-1 + 1e-12, 1 - 1e-12)) / math.pi
    return torch.stack([u, v], -1)


def build_template(subdivision_level: int) -> TemplateSphere:
    """Geodesic sphere: the icosahedron subdivided ``subdivision_level`` times."""
    if subdivision_level < 0:
        raise ValueError("subdivision level must be >= 0")
    v, f = _icosahedron()
    for _ in range(subdivision_level):
        v, f = subdivide(v, f)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return TemplateSphere(vertices=v, faces=f, uv=uv_of_point(v), level=subdivision_level)


# --------------------------------------------------------------------------- meshes


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)


@dataclass
class DeformableMesh:
    """Output of :func:`deform`; ``vertices`` may carry autograd history."""

    vertices: torch.Tensor
    faces: np.ndarray
    uv: np.ndarray
    template: np.ndarray  # template positions, the texture anchor of each vertex
    scale: torch.Tensor

    def numpy(self) -> Mesh:
        return Mesh(self.vertices.detach().cpu().numpy().astype(np.float64), self.faces, self.uv)


class DeformationField(nn.Module):
    """MLP psi(v, z) -> displacement; output passes through tanh so |psi| <= 1."""

    def __init__(self, latent_dim: int, hidden: int = 128, layers: int = 3):
        super().__init__()
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.layers = int(layers)
        dims = [3 + self.latent_dim] + [self.hidden] * self.layers
        mods = []
        for a, b in zip(dims[:-1], dims[1:]):
            mods += [nn.Linear(a, b), nn.Softplus(beta=5.0)]
        self.body = nn.Sequential(*mods)
        self.head = nn.Linear(dims[-1], 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.to(default_dtype())

    def forward(self, v: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        z = z.to(v.dtype).reshape(1, -1).expand(v.shape[0], -1)
        return torch.tanh(self.head(self.body(torch.cat([v, z], dim=1))))

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def load_flat(self, flat: torch.Tensor) -> None:
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(flat[i:i + n].reshape(p.shape))
                i += n


class ZeroField(nn.Module):
    """psi == 0; useful for rigid templates and as a test fixture."""

    def __init__(self, latent_dim: int = 1):
        super().__init__()
        self.latent_dim = latent_dim

    def forward(self, v, z):
        return torch.zeros_like(v)


def deform(template: TemplateSphere, psi: nn.Module, z, s) -> DeformableMesh:
    v = torch.as_tensor(template.vertices, dtype=default_dtype())
    z = torch.as_tensor(z, dtype=default_dtype())
    s = torch.as_tensor(s, dtype=default_dtype())
    if z.numel() != psi.latent_dim:
        raise ValueError(f"latent length {z.numel()} != field latent dim {psi.latent_dim}")
    if s.numel() != 3:
        raise ValueError("scale must be a 3-vector")
    disp = psi(v, z)
    if not bool(torch.isfinite(disp).all()):
        raise NonFiniteError("deformation field produced non-finite output")
    verts = s.reshape(1, 3) * (v + disp)
    return DeformableMesh(verts, template.faces, template.uv, template.vertices, s)


def vertex_normals(verts: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    f = torch.as_tensor(faces)
    a, b, c = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
    fn = torch.linalg.cross(b - a, c - a, dim=1)
    vn = torch.zeros_like(verts)
    for k in range(3):
        vn = vn.index_add(0, f[:, k], fn)
    return vn / torch.linalg.norm(vn, dim=1, keepdim=True).clamp_min(1e-12)


# --------------------------------------------------------------------------- distances


def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Barycentric weights (N, 3) of the closest point on triangles abc to p.

    Vectorized Voronoi-region test; degenerate (zero-area) triangles fall back
    to the nearest of their three edges.  Returns ``(bary, degenerate_mask)``.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        inner_v = vb / denom
        inner_w = vc / denom
        bary[:] = np.stack([1 - inner_v - inner_w, inner_v, inner_w], 1)

        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m] = np.stack([np.zeros(m.sum()), 1 - w[m], w[m]], 1)

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        w = d2 / (d2 - d6)
        bary[m] = np.stack([1 - w[m], np.zeros(m.sum()), w[m]], 1)

        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = [0.0, 0.0, 1.0]

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v = d1 / (d1 - d3)
        bary[m] = np.stack([1 - v[m], v[m], np.zeros(m.sum())], 1)

        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = [0.0, 1.0, 0.0]

        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = [1.0, 0.0, 0.0]

    area2 = np.linalg.norm(np.cross(ab, ac), axis=1)
    scale = np.maximum(np.maximum(np.einsum("ij,ij->i", ab, ab), np.einsum("ij,ij->i", ac, ac)), 1e-300)
    degenerate = (area2 <= 1e-14 * scale) | ~np.all(np.isfinite(bary), axis=1)
    if degenerate.any():
        bary[degenerate] = _segment_fallback(p[degenerate], a[degenerate], b[degenerate], c[degenerate])
    return bary, degenerate


def _segment_fallback(p, a, b, c):
    best = np.full(len(p), np.inf)
    out = np.zeros((len(p), 3))
    for i, j in ((0, 1), (1, 2), (2, 0)):
        P = (a, b, c)
        s, e = P[i], P[j]
        d = e - s
        dd = np.einsum("ij,ij->i", d, d)
        t = np.where(dd > 0, np.einsum("ij,ij->i", p - s, d) / np.where(dd > 0, dd, 1), 0.0)
        t = np.clip(t, 0, 1)
        q = s + t[:, None] * d
        dist = np.linalg.norm(p - q, axis=1)
        better = dist < best
        best = np.where(better, dist, best)
        w = np.zeros((len(p), 3))
        w[:, i] = 1 - t
        w[:, j] += t
        out[better] = w[better]
    return out


def point_face_distance(p, tri) -> float:
    """Euclidean distance from a point to a closed triangle ``tri`` (3, 3)."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    tri = np.asarray(tri, dtype=np.float64)
    bary, degenerate = closest_point_barycentric(p, tri[None, 0], tri[None, 1], tri[None, 2])
    if degenerate[0]:
        warnings.warn("degenerate triangle: using edge/vertex fallback", RuntimeWarning, stacklevel=2)
    q = bary @ tri
    return float(np.linalg.norm(p[0] - q[0]))


class TriangleIndex:
    """Exact nearest-triangle queries accelerated by a KD-tree over centroids.

    A candidate superset is gathered with a ball query of radius
    ``upper_bound + max_circumradius`` so the answer equals exhaustive search.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, k: int = 8):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("empty mesh")
        tri = self.vertices[self.faces]
        self.centroids = tri.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(tri - self.centroids[:, None], axis=2)))
        self.tree = cKDTree(self.centroids)
        self.k = min(k, len(self.faces))
        self.degenerate_hits = 0

    def _eval(self, pts, fidx):
        tri = self.vertices[self.faces[fidx]]
        bary, deg = closest_point_barycentric(pts, tri[:, 0], tri[:, 1], tri[:, 2])
        self.degenerate_hits += int(deg.sum())
        q = np.einsum("ij,ijk->ik", bary, tri)
        return np.linalg.norm(pts - q, axis=1), bary

    def query(self, points: np.ndarray):
        """Return ``(distance, face_index, barycentric)`` of the closest surface point."""
        pts = np.asarray(points, dtype=np.float64)
        n = len(pts)
        _, near = self.tree.query(pts, k=self.k)
        near = np.asarray(near).reshape(n, -1)
        rep = np.repeat(np.arange(n), near.shape[1])
        dist, _ = self._eval(pts[rep], near.reshape(-1))
        ub = dist.reshape(n, -1).min(axis=1)
        cands = self.tree.query_ball_point(pts, r=ub + self.radius + 1e-12)
        counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=n)
        rep = np.repeat(np.arange(n), counts)
        flat = np.fromiter((i for c in cands for i in c), dtype=np.int64, count=int(counts.sum()))
        d, bary = self._eval(pts[rep], flat)
        # per-point argmin; ties resolved toward the lower face index
        order = np.lexsort((flat, d, rep))
        first = np.ones(len(order), dtype=bool)
        first[1:] = rep[order][1:] != rep[order][:-1]
        sel = order[first]
        return d[sel], flat[sel], bary[sel]


def _directed(points: np.ndarray, index: TriangleIndex) -> float:
    d, _, _ = index.query(points)
    return float(d.sum())


def mesh_distance(A: Mesh, B: Mesh) -> float:
    """Sum of vertex-to-surface distances in both directions between two meshes."""
    if len(A.vertices) == 0 or len(B.vertices) == 0 or len(A.faces) == 0 or len(B.faces) == 0:
        raise ValueError("mesh_distance needs two non-empty meshes")
    return _directed(A.vertices, TriangleIndex(B.vertices, B.faces)) + \
        _directed(B.vertices, TriangleIndex(A.vertices, A.faces))


def mesh_distance_torch(verts: torch.Tensor, faces: np.ndarray, target: Mesh,
                        target_index: TriangleIndex | None = None, reduce: str = "sum") -> torch.Tensor:
    """Differentiable bidirectional vertex-to-face distance w.r.t. ``verts``.

    Closest faces and barycentrics are found without gradients; the distance is
    then rebuilt from them, which gives the exact gradient of the min.
    """
    target_index = target_index or TriangleIndex(target.vertices, target.faces)
    vnp = verts.detach().cpu().numpy().astype(np.float64)
    _, fi, bary = target_index.query(vnp)
    tgt = torch.as_tensor(target.vertices, dtype=verts.dtype)
    tf = torch.as_tensor(target.faces[fi])
    q = (torch.as_tensor(bary, dtype=verts.dtype)[:, :, None] * tgt[tf]).sum(1)
    d_fwd = _safe_norm(verts - q)

    own = TriangleIndex(vnp, faces)
    _, fj, bary2 = own.query(target.vertices)
    of = torch.as_tensor(np.asarray(faces)[fj])
    q2 = (torch.as_tensor(bary2, dtype=verts.dtype)[:, :, None] * verts[of]).sum(1)
    d_bwd = _safe_norm(tgt - q2)
    if reduce == "sum":
        return d_fwd.sum() + d_bwd.sum()
    if reduce == "mean":
        return (d_fwd.sum() + d_bwd.sum()) / (len(d_fwd) + len(d_bwd))
    raise ValueError(f"unknown reduce {reduce!r}")


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((x * x).sum(-1) + 1e-24)


# --------------------------------------------------------------------------- regularizers


def vertex_neighbors(faces: np.ndarray, n_vertices: int):
    e = unique_edges(np.asarray(faces))
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(src, minlength=n_vertices)
    return src, dst, deg


def laplacian_loss(verts, faces) -> torch.Tensor:
    """Mean over vertices of |v_i - mean(neighbours of v_i)| (uniform weights)."""
    verts = torch.as_tensor(verts, dtype=default_dtype()) if not isinstance(verts, torch.Tensor) else verts
    src, dst, deg = vertex_neighbors(faces, len(verts))
    acc = torch.zeros_like(verts).index_add(0, torch.as_tensor(src), verts[torch.as_tensor(dst)])
    d = torch.as_tensor(np.maximum(deg, 1), dtype=verts.dtype)[:, None]
    lap = verts - acc / d
    return _safe_norm(lap).mean()


def face_adjacency(faces: np.ndarray) -> np.ndarray:
    """Pairs of face indices sharing an edge."""
    faces = np.asarray(faces)
    nf = len(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    fid = np.tile(np.arange(nf), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, fid = e[order], fid[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    return np.stack([fid[:-1][same], fid[1:][same]], 1)


def normal_consistency_loss(verts, faces, adjacency: np.ndarray | None = None) -> torch.Tensor:
    """Mean of (1 - cos) between normals of edge-adjacent faces."""
    verts = torch.as_tensor(verts, dtype=default_dtype()) if not isinstance(verts, torch.Tensor) else verts
    adjacency = face_adjacency(faces) if adjacency is None else adjacency
    f = torch.as_tensor(np.asarray(faces))
    a, b, c = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
    n = torch.linalg.cross(b - a, c - a, dim=1)
    n = n / _safe_norm(n)[:, None]
    adj = torch.as_tensor(adjacency)
    cos = (n[adj[:, 0]] * n[adj[:, 1]]).sum(1)
    return (1.0 - cos).mean()


# --------------------------------------------------------------------------- fitting


class FitDivergedError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class FitConfig:
    steps: int = 400
    lr: float = 0.01
    lambda_lap: float = 0.3
    lambda_normal: float = 0.1
    hidden: int = 128
    layers: int = 3
    seed: int = 0


@dataclass
class FitResult:
    psi: DeformationField
    scale: np.ndarray
    history: list = field(default_factory=list)
    canonical_factor: float = 1.0
    baseline: list = field(default_factory=list)
    final: list = field(default_factory=list)


def canonicalize(exemplars: list[Mesh]) -> tuple[list[Mesh], float]:
    """Recenter each exemplar on its bounding-box centre and divide by the
    largest half-extent over the whole set, so the set fits in [-1, 1]^3."""
    centred = []
    for m in exemplars:
        lo, hi = m.vertices.min(0), m.vertices.max(0)
        centred.append(Mesh(m.vertices - (lo + hi) / 2, m.faces))
    k = max(float(np.abs(m.vertices).max()) for m in centred)
    if k <= 0:
        raise ValueError("degenerate exemplar set")
    return [Mesh(m.vertices / k, m.faces) for m in centred], k


def one_hot(k: int, n: int) -> np.ndarray:
    z = np.zeros(n)
    z[k] = 1.0
    return z


def fit_loss(psi, log_scale_or_scale, template, targets, indices, cfg: FitConfig,
             adjacency=None, scale_is_log=False):
    """Normalized fit objective: mean vertex-to-face distance plus regularizers."""
    s = torch.exp(log_scale_or_scale) if scale_is_log else log_scale_or_scale
    K = len(targets)
    total = 0.0
    for k, (tgt, idx) in enumerate(zip(targets, indices)):
        mesh = deform(template, psi, one_hot(k, K), s)
        total = total + mesh_distance_torch(mesh.vertices, template.faces, tgt, idx, reduce="mean")
        if cfg.lambda_lap:
            total = total + cfg.lambda_lap * laplacian_loss(mesh.vertices, template.faces)
        if cfg.lambda_normal:
            total = total + cfg.lambda_normal * normal_consistency_loss(mesh.vertices, template.faces, adjacency)
    return total


def fit_shape_space(exemplars: list[Mesh], template: TemplateSphere, cfg: FitConfig | None = None) -> FitResult:
    """Fit psi and the per-axis scale s so each one-hot latent reproduces its exemplar."""
    cfg = cfg or FitConfig()
    if not exemplars:
        raise ValueError("need at least one exemplar")
    targets, k = canonicalize(exemplars)
    torch.manual_seed(cfg.seed)
    K = len(targets)
    psi = DeformationField(K, cfg.hidden, cfg.layers)
    scale = torch.ones(3, dtype=default_dtype(), requires_grad=True)
    indices = [TriangleIndex(t.vertices, t.faces) for t in targets]
    adjacency = face_adjacency(template.faces)
    opt = Adam(list(psi.parameters()) + [scale], lr=cfg.lr)

    def per_latent():
        with torch.no_grad():
            return [float(mesh_distance_torch(deform(template, psi, one_hot(i, K), scale).vertices,
                                              template.faces, t, idx))
                    for i, (t, idx) in enumerate(zip(targets, indices))]

    baseline = per_latent()
    history = []
    for step in range(cfg.steps):
        opt.zero_grad()
        loss = fit_loss(psi, scale, template, targets, indices, cfg, adjacency)
        value = float(loss.detach())
        history.append(value)
        if not math.isfinite(value):
            raise FitDivergedError(f"fit diverged at step {step} (loss={value})", history)
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.debug("fit step %d loss %.6f", step, value)
    final = per_latent()
    s = scale.detach().cpu().numpy() * k
    return FitResult(psi=psi, scale=s, history=history, canonical_factor=k, baseline=baseline, final=final)
