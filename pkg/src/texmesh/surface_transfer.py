"""Differentiable transfer of image-plane features onto the texture grid.

Every 2x2 block of on-object pixels spans a quadrilateral in UV space.  Each
texel centre falling inside that quadrilateral receives the bilinear blend of
the four pixel features, with weights from inverting the bilinear map of the
quad.  Texels covered by several quads store the average.  Quads whose UV
bounding box is wider than ``skip`` (in either axis) straddle the seam or a
pole and are dropped.

Gradients
---------
With ``a, b`` the inverse-bilinear coordinates of texel centre ``p`` in a quad
with UV corners ``C_1..C_4`` and weights ``w = [(1-a)(1-b), a(1-b), ab, (1-a)b]``::

    Fhat_t = (1 / what_t) * sum_e sum_k w_ek F[p_ek]

``what_t`` counts covering quads (the bilinear basis sums to one), so it
carries no gradient.  For the corners, implicit differentiation of
``sum_k w_k(a, b) C_k = p`` gives ``d(a, b)/dC_j = -J^{-1} w_j`` with ``J`` the
2x2 Jacobian of the bilinear map, hence::

    dL/dC_j = -w_j * J^{-T} gamma,  gamma = sum_k (G_t . F[p_k] / what_t) dw_k/d(a, b)

where ``G_t`` is the upstream gradient at the texel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from numba import njit

MAX_QUADS = 10
SKIP_EXTENT = 0.2
NEWTON_ITERS = 20
INVISIBLE = -1


@njit(cache=True)
def _bilerp_jac(c, a, b):
    # c: (4, 2) corners
    pu = (1 - a) * (1 - b) * c[0, 0] + a * (1 - b) * c[1, 0] + a * b * c[2, 0] + (1 - a) * b * c[3, 0]
    pv = (1 - a) * (1 - b) * c[0, 1] + a * (1 - b) * c[1, 1] + a * b * c[2, 1] + (1 - a) * b * c[3, 1]
    dau = -(1 - b) * c[0, 0] + (1 - b) * c[1, 0] + b * c[2, 0] - b * c[3, 0]
    dav = -(1 - b) * c[0, 1] + (1 - b) * c[1, 1] + b * c[2, 1] - b * c[3, 1]
    dbu = -(1 - a) * c[0, 0] - a * c[1, 0] + a * c[2, 0] + (1 - a) * c[3, 0]
    dbv = -(1 - a) * c[0, 1] - a * c[1, 1] + a * c[2, 1] + (1 - a) * c[3, 1]
    return pu, pv, dau, dav, dbu, dbv


@njit(cache=True)
def _inverse_bilinear(c, px, py):
    a, b = 0.5, 0.5
    for _ in range(NEWTON_ITERS):
        pu, pv, dau, dav, dbu, dbv = _bilerp_jac(c, a, b)
        ru, rv = pu - px, pv - py
        det = dau * dbv - dbu * dav
        if abs(det) < 1e-300:
            return a, b, False
        da = (dbv * ru - dbu * rv) / det
        db = (-dav * ru + dau * rv) / det
        a -= da
        b -= db
        if abs(da) < 1e-14 and abs(db) < 1e-14:
            return a, b, True
    pu, pv, _, _, _, _ = _bilerp_jac(c, a, b)
    ok = abs(pu - px) < 1e-12 and abs(pv - py) < 1e-12
    return a, b, ok


@njit(cache=True)
def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)


@njit(cache=True)
def _in_triangle(ax, ay, bx, by, cx, cy, px, py):
    area = _orient(ax, ay, bx, by, cx, cy)
    if area == 0.0:
        return False
    s = 1.0 if area > 0 else -1.0
    return (s * _orient(ax, ay, bx, by, px, py) >= 0.0 and s * _orient(bx, by, cx, cy, px, py) >= 0.0
            and s * _orient(cx, cy, ax, ay, px, py) >= 0.0)


@njit(cache=True)
def _build_lookup(U, mask, q, skip, max_quads, count, qid, wts, abs_, stats):
    H, W = mask.shape
    c = np.empty((4, 2))
    for r in range(H - 1):
        for col in range(W - 1):
            if not (mask[r, col] and mask[r, col + 1] and mask[r + 1, col + 1] and mask[r + 1, col]):
                continue
            c[0, 0], c[0, 1] = U[r, col, 0], U[r, col, 1]
            c[1, 0], c[1, 1] = U[r, col + 1, 0], U[r, col + 1, 1]
            c[2, 0], c[2, 1] = U[r + 1, col + 1, 0], U[r + 1, col + 1, 1]
            c[3, 0], c[3, 1] = U[r + 1, col, 0], U[r + 1, col, 1]
            umin = min(min(c[0, 0], c[1, 0]), min(c[2, 0], c[3, 0]))
            umax = max(max(c[0, 0], c[1, 0]), max(c[2, 0], c[3, 0]))
            vmin = min(min(c[0, 1], c[1, 1]), min(c[2, 1], c[3, 1]))
            vmax = max(max(c[0, 1], c[1, 1]), max(c[2, 1], c[3, 1]))
            if umax - umin > skip or vmax - vmin > skip:
                stats[0] += 1
                continue
            a1 = _orient(c[0, 0], c[0, 1], c[1, 0], c[1, 1], c[2, 0], c[2, 1])
            a2 = _orient(c[0, 0], c[0, 1], c[2, 0], c[2, 1], c[3, 0], c[3, 1])
            if a1 + a2 == 0.0:
                stats[1] += 1
                continue
            ci0 = max(int(np.ceil(umin * q - 0.5)), 0)
            ci1 = min(int(np.floor(umax * q - 0.5)), q - 1)
            ri0 = max(int(np.ceil(vmin * q - 0.5)), 0)
            ri1 = min(int(np.floor(vmax * q - 0.5)), q - 1)
            quad = r * (W - 1) + col
            for tr in range(ri0, ri1 + 1):
                py = (tr + 0.5) / q
                for tc in range(ci0, ci1 + 1):
                    px = (tc + 0.5) / q
                    inside = _in_triangle(c[0, 0], c[0, 1], c[1, 0], c[1, 1], c[2, 0], c[2, 1], px, py) or \
                        _in_triangle(c[0, 0], c[0, 1], c[2, 0], c[2, 1], c[3, 0], c[3, 1], px, py)
                    if not inside:
                        continue
                    a, b, ok = _inverse_bilinear(c, px, py)
                    if not ok or a < -1e-9 or a > 1 + 1e-9 or b < -1e-9 or b > 1 + 1e-9:
                        stats[2] += 1
                        continue
                    a = min(max(a, 0.0), 1.0)
                    b = min(max(b, 0.0), 1.0)
                    n = count[tr, tc]
                    if n >= max_quads:
                        stats[3] += 1
                        continue
                    qid[tr, tc, n] = quad
                    abs_[tr, tc, n, 0] = a
                    abs_[tr, tc, n, 1] = b
                    wts[tr, tc, n, 0] = (1 - a) * (1 - b)
                    wts[tr, tc, n, 1] = a * (1 - b)
                    wts[tr, tc, n, 2] = a * b
                    wts[tr, tc, n, 3] = (1 - a) * b
                    count[tr, tc] = n + 1


@njit(cache=True)
def _corner_pixels(quad, W):
    r = quad // (W - 1)
    col = quad % (W - 1)
    return (r * W + col, r * W + col + 1, (r + 1) * W + col + 1, (r + 1) * W + col)


@njit(cache=True)
def _splat(Fflat, W, count, qid, wts, out, what):
    q = count.shape[0]
    C = Fflat.shape[1]
    for tr in range(q):
        for tc in range(q):
            n = count[tr, tc]
            if n == 0:
                continue
            tot = 0.0
            for e in range(n):
                p = _corner_pixels(qid[tr, tc, e], W)
                for k in range(4):
                    w = wts[tr, tc, e, k]
                    tot += w
                    for ch in range(C):
                        out[tr, tc, ch] += w * Fflat[p[k], ch]
            what[tr, tc] = tot
            for ch in range(C):
                out[tr, tc, ch] /= tot


@njit(cache=True)
def _backward(G, Fflat, Uflat, W, count, qid, wts, abs_, what, dF, dU):
    q = count.shape[0]
    C = Fflat.shape[1]
    c = np.empty((4, 2))
    for tr in range(q):
        for tc in range(q):
            n = count[tr, tc]
            if n == 0:
                continue
            inv = 1.0 / what[tr, tc]
            for e in range(n):
                p = _corner_pixels(qid[tr, tc, e], W)
                gw = np.zeros(4)
                for k in range(4):
                    w = wts[tr, tc, e, k] * inv
                    s = 0.0
                    for ch in range(C):
                        dF[p[k], ch] += w * G[tr, tc, ch]
                        s += G[tr, tc, ch] * Fflat[p[k], ch]
                    gw[k] = s * inv
                a = abs_[tr, tc, e, 0]
                b = abs_[tr, tc, e, 1]
                # dL/d(a, b) through the bilinear basis
                ga = -(1 - b) * gw[0] + (1 - b) * gw[1] + b * gw[2] - b * gw[3]
                gb = -(1 - a) * gw[0] - a * gw[1] + a * gw[2] + (1 - a) * gw[3]
                for k in range(4):
                    c[k, 0] = Uflat[p[k], 0]
                    c[k, 1] = Uflat[p[k], 1]
                _, _, dau, dav, dbu, dbv = _bilerp_jac(c, a, b)
                det = dau * dbv - dbu * dav
                if det == 0.0:
                    continue
                # lam = J^{-T} gamma, J = [[dau, dbu], [dav, dbv]]
                lu = (dbv * ga - dav * gb) / det
                lv = (-dbu * ga + dau * gb) / det
                for k in range(4):
                    w = wts[tr, tc, e, k]
                    dU[p[k], 0] -= w * lu
                    dU[p[k], 1] -= w * lv


# --------------------------------------------------------------------------- python surface


@dataclass
class QuadLookup:
    count: np.ndarray  # (q, q)
    quad_id: np.ndarray  # (q, q, MAX)
    weights: np.ndarray  # (q, q, MAX, 4)
    ab: np.ndarray  # (q, q, MAX, 2)
    image_shape: tuple[int, int]
    stats: dict = field(default_factory=dict)

    def corner_pixels(self, quad: int) -> tuple[int, int, int, int]:
        return _corner_pixels(int(quad), self.image_shape[1])


@dataclass
class SurfaceFeatureMap:
    features: np.ndarray  # (q, q, C)
    weight: np.ndarray  # (q, q)

    @property
    def visible(self) -> np.ndarray:
        return self.weight > 0


def quad_weights(p, quad) -> np.ndarray:
    """Bilinear weights (w1..w4) of point ``p`` inside a quad of four UV corners.

    Corners are ordered around the quad (pixel (r,c), (r,c+1), (r+1,c+1),
    (r+1,c)).  Raises ``ValueError`` when the inverse map does not converge or
    ``p`` falls outside.
    """
    c = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    px, py = map(float, p)
    a, b, ok = _inverse_bilinear(c, px, py)
    if not ok or not (-1e-9 <= a <= 1 + 1e-9 and -1e-9 <= b <= 1 + 1e-9):
        raise ValueError("point is outside the quad or the quad is degenerate")
    a, b = min(max(a, 0.0), 1.0), min(max(b, 0.0), 1.0)
    return np.array([(1 - a) * (1 - b), a * (1 - b), a * b, (1 - a) * b])


def build_lookup(U: np.ndarray, mask: np.ndarray, q: int, skip: float = SKIP_EXTENT,
                 max_quads: int = MAX_QUADS) -> QuadLookup:
    U = np.ascontiguousarray(U, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if U.shape[:2] != mask.shape:
        raise ValueError("UV grid and mask differ in shape")
    count = np.zeros((q, q), dtype=np.int64)
    qid = np.full((q, q, max_quads), -1, dtype=np.int64)
    wts = np.zeros((q, q, max_quads, 4))
    ab = np.zeros((q, q, max_quads, 2))
    stats = np.zeros(4, dtype=np.int64)
    _build_lookup(U, mask, int(q), float(skip), int(max_quads), count, qid, wts, ab, stats)
    names = ("skipped_extent", "skipped_degenerate", "skipped_newton", "overflow")
    return QuadLookup(count, qid, wts, ab, mask.shape, dict(zip(names, map(int, stats))))


def transfer_forward(U: np.ndarray, F: np.ndarray, mask: np.ndarray, q: int,
                     skip: float = SKIP_EXTENT, max_quads: int = MAX_QUADS):
    """Splat image features ``F`` (H, W, C) onto a q x q texture through UVs ``U``.

    Returns ``(SurfaceFeatureMap, QuadLookup)``.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape[:2] != np.shape(mask):
        raise ValueError("feature map and UV grid differ in resolution")
    lookup = build_lookup(U, mask, q, skip, max_quads)
    return splat_with_lookup(F, lookup), lookup


def splat_with_lookup(F: np.ndarray, lookup: QuadLookup) -> SurfaceFeatureMap:
    H, W = lookup.image_shape
    q = lookup.count.shape[0]
    Fflat = np.ascontiguousarray(np.asarray(F, dtype=np.float64).reshape(H * W, -1))
    out = np.zeros((q, q, Fflat.shape[1]))
    what = np.zeros((q, q))
    _splat(Fflat, W, lookup.count, lookup.quad_id, lookup.weights, out, what)
    return SurfaceFeatureMap(out, what)


def transfer_backward(upstream: np.ndarray, lookup: QuadLookup, U: np.ndarray, F: np.ndarray,
                      weight: np.ndarray | None = None):
    """Gradients ``(dL/dF (H, W, C), dL/dU (H, W, 2))`` given ``dL/dFhat`` (q, q, C)."""
    H, W = lookup.image_shape
    q = lookup.count.shape[0]
    G = np.ascontiguousarray(upstream, dtype=np.float64)
    if G.shape[:2] != (q, q):
        raise ValueError("upstream gradient does not match the lookup's texture size")
    Fflat = np.ascontiguousarray(np.asarray(F, dtype=np.float64).reshape(H * W, -1))
    Uflat = np.ascontiguousarray(np.asarray(U, dtype=np.float64).reshape(H * W, 2))
    if G.shape[2] != Fflat.shape[1]:
        raise ValueError("upstream channel count does not match features")
    if weight is None:
        weight = lookup.weights[..., :].sum(-1).sum(-1)
    dF = np.zeros_like(Fflat)
    dU = np.zeros_like(Uflat)
    _backward(G, Fflat, Uflat, W, lookup.count, lookup.quad_id, lookup.weights, lookup.ab,
              np.ascontiguousarray(weight, dtype=np.float64), dF, dU)
    return dF.reshape(H, W, -1), dU.reshape(H, W, 2)


def transfer_segmentation(U: np.ndarray, mask: np.ndarray, labels: np.ndarray, n_labels: int,
                          q: int, skip: float = SKIP_EXTENT) -> np.ndarray:
    """Splat one-hot pixel labels to the surface and take the per-texel argmax.

    Uncovered texels get :data:`INVISIBLE`.
    """
    labels = np.asarray(labels)
    onehot = np.zeros(labels.shape + (n_labels,))
    valid = (labels >= 0) & (labels < n_labels)
    onehot[valid, labels[valid]] = 1.0
    surf, _ = transfer_forward(U, onehot, mask, q, skip)
    out = np.argmax(surf.features, axis=-1)
    out[~surf.visible] = INVISIBLE
    return out


class _TransferFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, U, F, mask, q, skip, max_quads):
        Un = U.detach().cpu().numpy().astype(np.float64)
        Fn = F.detach().cpu().numpy().astype(np.float64)
        lookup = build_lookup(Un, mask, q, skip, max_quads)
        surf = splat_with_lookup(Fn, lookup)
        ctx.lookup = lookup
        ctx.weight = surf.weight
        ctx.save_for_backward(U, F)
        feats = torch.as_tensor(surf.features, dtype=F.dtype)
        weight = torch.as_tensor(surf.weight, dtype=F.dtype)
        ctx.mark_non_differentiable(weight)
        return feats, weight

    @staticmethod
    def backward(ctx, g_feats, g_weight):
        U, F = ctx.saved_tensors
        dF, dU = transfer_backward(g_feats.detach().cpu().numpy(), ctx.lookup,
                                   U.detach().cpu().numpy(), F.detach().cpu().numpy(), ctx.weight)
        return (torch.as_tensor(dU, dtype=U.dtype), torch.as_tensor(dF, dtype=F.dtype),
                None, None, None, None)


def surface_transfer(U: torch.Tensor, F: torch.Tensor, mask: np.ndarray, q: int,
                     skip: float = SKIP_EXTENT, max_quads: int = MAX_QUADS):
    """Autograd-aware transfer: returns ``(Fhat (q, q, C), what (q, q))``."""
    return _TransferFn.apply(U, F, np.ascontiguousarray(mask, dtype=np.bool_), int(q), float(skip),
                             int(max_quads))


def splat_matrix(lookup: QuadLookup):
    """The forward splat as a sparse ``(q*q, H*W)`` CSR matrix.

    For a fixed lookup the transfer is linear in ``F``:
    ``Fhat.reshape(q*q, C) == splat_matrix(lookup) @ F.reshape(H*W, C)``.
    """
    from scipy.sparse import csr_matrix

    H, W = lookup.image_shape
    q = lookup.count.shape[0]
    rows, cols, vals = [], [], []
    tr, tc = np.nonzero(lookup.count)
    for r, c in zip(tr, tc):
        n = lookup.count[r, c]
        tot = lookup.weights[r, c, :n].sum()
        for e in range(n):
            corners = _corner_pixels(int(lookup.quad_id[r, c, e]), W)
            for k in range(4):
                rows.append(r * q + c)
                cols.append(corners[k])
                vals.append(lookup.weights[r, c, e, k] / tot)
    return csr_matrix((vals, (rows, cols)), shape=(q * q, H * W))
