"""Hard z-buffered triangle rasterization and neural-texture rendering.

Visibility (which face owns a pixel) is decided without gradients by a numba
kernel.  Everything downstream of that decision, i.e. barycentrics, UV,
normals, view directions and sampled features, is rebuilt in torch from the
vertex positions and camera parameters, so gradients flow to both while
coverage changes contribute nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit

from .camera import Intrinsics, rotation_torch
from .diffcore import default_dtype
from .geometry import uv_of_point_torch, vertex_normals

NEAR = 1e-6


@njit(cache=True)
def _raster_kernel(vc, faces, H, W, f, cx, cy, face_idx, zbuf, bary):
    nf = faces.shape[0]
    for fi in range(nf):
        a, b, c = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        z0, z1, z2 = vc[a, 2], vc[b, 2], vc[c, 2]
        if z0 <= NEAR or z1 <= NEAR or z2 <= NEAR:
            continue
        x0 = f * vc[a, 0] / z0 + cx
        y0 = f * vc[a, 1] / z0 + cy
        x1 = f * vc[b, 0] / z1 + cx
        y1 = f * vc[b, 1] / z1 + cy
        x2 = f * vc[c, 0] / z2 + cx
        y2 = f * vc[c, 1] / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-14:
            continue
        jmin = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        jmax = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), W - 1)
        imin = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        imax = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), H - 1)
        for i in range(imin, imax + 1):
            py = i + 0.5
            for j in range(jmin, jmax + 1):
                px = j + 0.5
                l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                w0, w1, w2 = l0 / z0, l1 / z1, l2 / z2
                s = w0 + w1 + w2
                z = 1.0 / s
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    face_idx[i, j] = fi
                    bary[i, j, 0] = w0 * z
                    bary[i, j, 1] = w1 * z
                    bary[i, j, 2] = w2 * z


@dataclass
class FragmentMap:
    face_idx: np.ndarray  # (H, W) int64, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct
    depth: np.ndarray  # (H, W), inf where empty
    uv: np.ndarray | None = None  # (H, W, 2)

    @property
    def mask(self) -> np.ndarray:
        return self.face_idx >= 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_idx.shape


def rasterize_camera_space(verts_cam: np.ndarray, faces: np.ndarray, K: Intrinsics) -> FragmentMap:
    """Rasterize vertices already expressed in the camera frame."""
    H, W = int(K.height), int(K.width)
    if H < 1 or W < 1:
        raise ValueError("resolution must be at least 1x1")
    face_idx = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    bary = np.zeros((H, W, 3))
    _raster_kernel(np.ascontiguousarray(verts_cam, dtype=np.float64),
                   np.ascontiguousarray(faces, dtype=np.int64),
                   H, W, float(K.focal), float(K.cx), float(K.cy), face_idx, zbuf, bary)
    return FragmentMap(face_idx, bary, zbuf)


def rasterize(vertices, faces, R: np.ndarray, t: np.ndarray, K: Intrinsics,
              template: np.ndarray | None = None) -> FragmentMap:
    """Rasterize object-frame ``vertices`` seen through extrinsics ``(R, t)``.

    When ``template`` (the per-vertex sphere anchor) is given, the fragment
    map also carries the per-pixel polar UV of the interpolated anchor point.
    """
    v = vertices.detach().cpu().numpy() if isinstance(vertices, torch.Tensor) else np.asarray(vertices)
    vc = v.astype(np.float64) @ np.asarray(R).T + np.asarray(t)
    frags = rasterize_camera_space(vc, faces, K)
    if template is not None:
        from .geometry import uv_of_point
        m = frags.mask
        uv = np.zeros(frags.shape + (2,))
        if m.any():
            tri = np.asarray(template)[np.asarray(faces)[frags.face_idx[m]]]
            p = np.einsum("pk,pkc->pc", frags.bary[m], tri)
            uv[m] = uv_of_point(p)
        frags.uv = uv
    return frags


# --------------------------------------------------------------------------- differentiable path


def screen_barycentrics(verts_cam: torch.Tensor, faces: np.ndarray, face_ids: np.ndarray,
                        pix: torch.Tensor, K: Intrinsics) -> torch.Tensor:
    """Perspective-correct barycentrics of pixel centres ``pix`` (P, 2) in the given faces."""
    f = torch.as_tensor(np.asarray(faces)[face_ids])
    tri = verts_cam[f]  # (P, 3, 3)
    z = tri[..., 2]
    x = K.focal * tri[..., 0] / z + K.cx
    y = K.focal * tri[..., 1] / z + K.cy
    px, py = pix[:, 0:1], pix[:, 1:2]
    xr = x - px
    yr = y - py
    # sub-triangle areas opposite each vertex
    e0 = xr[:, 1] * yr[:, 2] - xr[:, 2] * yr[:, 1]
    e1 = xr[:, 2] * yr[:, 0] - xr[:, 0] * yr[:, 2]
    e2 = xr[:, 0] * yr[:, 1] - xr[:, 1] * yr[:, 0]
    lam = torch.stack([e0, e1, e2], 1)
    lam = lam / lam.sum(1, keepdim=True)
    w = lam / z
    return w / w.sum(1, keepdim=True)


@dataclass
class SurfaceFragments:
    """Differentiable per-pixel surface attributes for the covered pixels."""

    fragments: FragmentMap
    pixels: np.ndarray  # (P,) flat indices of covered pixels
    bary: torch.Tensor  # (P, 3)
    uv: torch.Tensor  # (P, 2)
    normal: torch.Tensor  # (P, 3) object frame, unit
    view: torch.Tensor  # (P, 3) unit vector from surface point toward the camera
    position: torch.Tensor  # (P, 3) object frame

    @property
    def mask(self) -> np.ndarray:
        return self.fragments.mask

    @property
    def shape(self):
        return self.fragments.shape


def pixel_centers(pixels: np.ndarray, W: int, dtype=None) -> torch.Tensor:
    i, j = np.divmod(pixels, W)
    return torch.as_tensor(np.stack([j + 0.5, i + 0.5], 1), dtype=dtype or default_dtype())


def extrinsics_torch(az, el, theta, distance):
    R = rotation_torch(az, el, theta)
    zero = torch.zeros_like(distance)
    t = torch.stack([zero, zero, distance])
    return R, t


def render_surface(vertices: torch.Tensor, faces: np.ndarray, template: np.ndarray,
                   R: torch.Tensor, t: torch.Tensor, K: Intrinsics,
                   normals: torch.Tensor | None = None) -> SurfaceFragments:
    """Rasterize then rebuild differentiable UV/normal/view attributes."""
    vc = vertices @ R.T + t
    frags = rasterize_camera_space(vc.detach().cpu().numpy().astype(np.float64), faces, K)
    pixels = np.flatnonzero(frags.mask.reshape(-1))
    fids = frags.face_idx.reshape(-1)[pixels]
    b = screen_barycentrics(vc, faces, fids, pixel_centers(pixels, K.width, vertices.dtype), K)
    ftri = torch.as_tensor(np.asarray(faces)[fids])
    tmpl = torch.as_tensor(template, dtype=vertices.dtype)
    anchor = (b[:, :, None] * tmpl[ftri]).sum(1)
    uv = uv_of_point_torch(anchor)
    if normals is None:
        normals = vertex_normals(vertices, faces)
    n = (b[:, :, None] * normals[ftri]).sum(1)
    n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp_min(1e-12)
    pos = (b[:, :, None] * vertices[ftri]).sum(1)
    center = -(R.T @ t)
    view = center[None, :] - pos
    view = view / torch.linalg.norm(view, dim=1, keepdim=True).clamp_min(1e-12)
    frags.uv = None
    return SurfaceFragments(frags, pixels, b, uv, n, view, pos)


def fragment_vertex_gradients(vertices, faces, attributes, pose, K: Intrinsics, upstream):
    """Gradients of ``sum(upstream * interpolated attributes)`` w.r.t. vertices and pose.

    ``attributes`` is a per-vertex (V, C) array interpolated with the
    perspective-correct barycentrics of the pixels ``pose`` makes visible;
    ``upstream`` is (H, W, C).  Face ownership is frozen (hard rasterization),
    so only barycentric motion carries gradient.  Returns
    ``(d_vertices (V, 3), d_pose (4,) over azimuth, elevation, theta, distance)``.
    """
    dt = default_dtype()
    v = torch.as_tensor(np.asarray(vertices), dtype=dt).clone().requires_grad_(True)
    p = torch.as_tensor(np.asarray(pose, dtype=np.float64), dtype=dt).clone().requires_grad_(True)
    R, t = extrinsics_torch(p[0], p[1], p[2], p[3])
    vc = v @ R.T + t
    frags = rasterize_camera_space(vc.detach().numpy(), faces, K)
    pixels = np.flatnonzero(frags.mask.reshape(-1))
    up = torch.as_tensor(np.asarray(upstream), dtype=dt).reshape(K.height * K.width, -1)[pixels]
    if len(pixels) == 0 or not bool(up.abs().sum() > 0):
        return np.zeros_like(v.detach().numpy()), np.zeros(4)
    fids = frags.face_idx.reshape(-1)[pixels]
    b = screen_barycentrics(vc, faces, fids, pixel_centers(pixels, K.width, dt), K)
    attr = torch.as_tensor(np.asarray(attributes), dtype=dt)
    ftri = torch.as_tensor(np.asarray(faces)[fids])
    interp = (b[:, :, None] * attr[ftri]).sum(1)
    gv, gp = torch.autograd.grad((interp * up).sum(), [v, p], allow_unused=True)
    gv = torch.zeros_like(v) if gv is None else gv
    gp = torch.zeros_like(p) if gp is None else gp
    return gv.detach().numpy(), gp.detach().numpy()


# --------------------------------------------------------------------------- textures


def sample_texture(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of a (b, q, q, d) texture at (P, 2) UVs -> (P, b, d).

    Texel (row r, col c) is centred at ``((c + .5) / q, (r + .5) / q)``; u wraps
    around the seam, v is clamped at the poles.
    """
    b, q, q2, d = texture.shape
    if q != q2 or q < 2:
        raise ValueError("texture must be square with q >= 2")
    x = uv[:, 0] * q - 0.5
    y = uv[:, 1] * q - 0.5
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx = (x - x0)[:, None, None]
    fy = (y - y0)[:, None, None]
    x0 = x0.long()
    y0 = y0.long()
    c0 = torch.remainder(x0, q)
    c1 = torch.remainder(x0 + 1, q)
    r0 = y0.clamp(0, q - 1)
    r1 = (y0 + 1).clamp(0, q - 1)
    tex = texture.permute(1, 2, 0, 3)  # (q, q, b, d)
    out = ((1 - fx) * (1 - fy) * tex[r0, c0] + fx * (1 - fy) * tex[r0, c1]
           + (1 - fx) * fy * tex[r1, c0] + fx * fy * tex[r1, c1])
    return out


def render_features(surface: SurfaceFragments | None, texture: torch.Tensor, alpha: torch.Tensor,
                    uv: torch.Tensor | None = None, pixels: np.ndarray | None = None,
                    shape: tuple[int, int] | None = None) -> torch.Tensor:
    """Feature map (H, W, d): per covered pixel ``sum_b alpha_b * texture_b(u, v)``.

    Empty pixels hold the zero vector; use the fragment mask as the
    off-object flag.
    """
    if surface is not None:
        uv, pixels, shape = surface.uv, surface.pixels, surface.shape
    H, W = shape
    d = texture.shape[-1]
    vals = sample_texture(texture, uv)
    feat = (alpha[:, :, None] * vals).sum(1)
    out = torch.zeros(H * W, d, dtype=feat.dtype)
    out = out.index_copy(0, torch.as_tensor(pixels, dtype=torch.long), feat)
    return out.reshape(H, W, d)


def dump_fragments_png(frags: FragmentMap, path) -> None:
    """Debug dump: depth, u, v and coverage as an 8-bit RGBA image."""
    from PIL import Image

    m = frags.mask
    depth = np.zeros(frags.shape)
    if m.any():
        d = frags.depth[m]
        depth[m] = 1.0 - (d - d.min()) / max(d.max() - d.min(), 1e-12)
    uv = frags.uv if frags.uv is not None else np.zeros(frags.shape + (2,))
    rgba = np.stack([depth, uv[..., 0], uv[..., 1], m.astype(float)], -1)
    Image.fromarray((np.clip(rgba, 0, 1) * 255).astype(np.uint8), "RGBA").save(path)
