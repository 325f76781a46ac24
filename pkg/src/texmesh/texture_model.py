"""Neural texture banks, viewing bins, feature likelihoods and momentum updates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import default_dtype


def _rodrigues(rotvec: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(rotvec)
    if theta == 0:
        return np.eye(3)
    k = rotvec / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * Kx + (1 - math.cos(theta)) * Kx @ Kx


@dataclass
class ViewingBinSet:
    """Fixed rotations applied to surface normals; bin 0 is the identity."""

    rotvecs: np.ndarray  # (b, 3) axis-angle

    @classmethod
    def build(cls, n_bins: int = 7, angle_deg: float = 60.0) -> "ViewingBinSet":
        """Identity plus ``n_bins - 1`` tilts by ``angle_deg`` about axes evenly
        spread around the object z axis (in the xy-plane)."""
        if n_bins < 1:
            raise ValueError("need at least one viewing bin")
        vecs = [np.zeros(3)]
        m = n_bins - 1
        for k in range(m):
            phi = 2 * math.pi * k / m
            vecs.append(math.radians(angle_deg) * np.array([math.cos(phi), math.sin(phi), 0.0]))
        return cls(np.array(vecs))

    @property
    def n_bins(self) -> int:
        return len(self.rotvecs)

    def matrices(self) -> np.ndarray:
        return np.stack([_rodrigues(r) for r in self.rotvecs])


def viewing_coefficients(normal, view_dir, bins: ViewingBinSet | np.ndarray, T: float = 5.0) -> torch.Tensor:
    """Softmax over bins of ``T * view_dir . (R_b normal)``.

    ``view_dir`` points from the surface toward the camera, so a surface seen
    head-on has ``view_dir == normal``.  Inputs are (..., 3); output (..., b).
    """
    n = torch.as_tensor(normal, dtype=default_dtype()) if not isinstance(normal, torch.Tensor) else normal
    d = torch.as_tensor(view_dir, dtype=n.dtype) if not isinstance(view_dir, torch.Tensor) else view_dir
    mats = bins.matrices() if isinstance(bins, ViewingBinSet) else np.asarray(bins)
    mats = torch.as_tensor(mats, dtype=n.dtype)
    if bool((torch.linalg.norm(n, dim=-1) == 0).any()) or bool((torch.linalg.norm(d, dim=-1) == 0).any()):
        raise ValueError("normal and view direction must be non-zero")
    rotated = torch.einsum("bij,...j->...bi", mats, n)
    logits = T * (rotated * d.unsqueeze(-2)).sum(-1)
    return torch.softmax(logits, dim=-1)


# --------------------------------------------------------------------------- likelihoods


def _log_norm(sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return -math.log(sigma * math.sqrt(2 * math.pi))


def foreground_loglik(f, theta, sigma: float = 1.0, alpha=None) -> torch.Tensor:
    """Log of the foreground Gaussian (mixture) density.

    ``theta`` is either the view-combined feature (d,) or per-bin features
    (b, d) mixed with ``alpha`` (b,).  Leading batch dimensions broadcast.
    """
    f = torch.as_tensor(f, dtype=default_dtype()) if not isinstance(f, torch.Tensor) else f
    theta = torch.as_tensor(theta, dtype=f.dtype) if not isinstance(theta, torch.Tensor) else theta
    c = _log_norm(sigma)
    if alpha is None:
        sq = ((f - theta) ** 2).sum(-1)
        return c - sq / (2 * sigma**2)
    alpha = torch.as_tensor(alpha, dtype=f.dtype) if not isinstance(alpha, torch.Tensor) else alpha
    sq = ((f.unsqueeze(-2) - theta) ** 2).sum(-1)
    return c + torch.logsumexp(torch.log(alpha) - sq / (2 * sigma**2), dim=-1)


def background_loglik(f, bank, sigma: float = 1.0) -> torch.Tensor:
    """Log density against the best-matching background feature in ``bank``."""
    f = torch.as_tensor(f, dtype=default_dtype()) if not isinstance(f, torch.Tensor) else f
    B = bank.features_tensor(f.dtype) if isinstance(bank, BackgroundBank) else torch.as_tensor(bank, dtype=f.dtype)
    if B.shape[0] == 0:
        raise ValueError("background bank is empty")
    sq = ((f.unsqueeze(-2) - B) ** 2).sum(-1)
    return _log_norm(sigma) - sq.min(-1).values / (2 * sigma**2)


def object_loglik(F, rendered_bins, alpha, foreground: np.ndarray, background: np.ndarray,
                  bank, sigma: float = 1.0) -> torch.Tensor:
    """Sum of foreground terms over ``foreground`` pixels plus background terms.

    ``F`` is (H, W, d); ``rendered_bins`` (H, W, b, d) holds per-bin texture
    samples and ``alpha`` (H, W, b) the viewing coefficients.  The masks must
    be disjoint and foreground pixels must be on the object.
    """
    foreground = np.asarray(foreground, bool)
    background = np.asarray(background, bool)
    if np.any(foreground & background):
        raise ValueError("foreground and background overlap")
    F = torch.as_tensor(F, dtype=default_dtype()) if not isinstance(F, torch.Tensor) else F
    total = torch.zeros((), dtype=F.dtype)
    if foreground.any():
        fg = torch.as_tensor(foreground)
        total = total + foreground_loglik(F[fg], rendered_bins[fg], sigma, alpha[fg]).sum()
    if background.any():
        bg = torch.as_tensor(background)
        total = total + background_loglik(F[bg], bank, sigma).sum()
    return total


# --------------------------------------------------------------------------- banks


def normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(n, 1e-12)


class NeuralTextureBank:
    """Per-class textures ``(b, q, q, d)`` of unit feature vectors."""

    def __init__(self, n_classes: int, n_bins: int, size: int, dim: int, rng: np.random.Generator | None = None,
                 textures: np.ndarray | None = None):
        if textures is None:
            rng = rng or np.random.default_rng(0)
            textures = normalize(rng.standard_normal((n_classes, n_bins, size, size, dim)))
        self.textures = np.asarray(textures, dtype=np.float64)
        if self.textures.shape[1] < 1:
            raise ValueError("need at least one bin")

    @property
    def n_classes(self) -> int:
        return self.textures.shape[0]

    @property
    def shape(self):
        return self.textures.shape[1:]

    def tensor(self, c: int, dtype=None) -> torch.Tensor:
        return torch.as_tensor(self.textures[c], dtype=dtype or default_dtype())


def momentum_update(texture: np.ndarray, surface: np.ndarray, visible: np.ndarray, alpha: np.ndarray,
                    momentum: float = 0.9) -> np.ndarray:
    """EMA update of visible texels, renormalized to unit length.

    ``texture`` (b, q, q, d); ``surface`` (q, q, d) splatted features;
    ``alpha`` (q, q, b) splatted viewing coefficients.  Invisible texels are
    returned bit-for-bit unchanged.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    out = texture.copy()
    vis = np.asarray(visible, bool)
    if momentum == 1.0 or not vis.any():
        return out
    cur = texture[:, vis, :]  # (b, n, d)
    a = np.moveaxis(alpha[vis], 1, 0)[..., None]  # (b, n, 1)
    upd = momentum * cur + (1 - momentum) * a * surface[vis][None]
    norm = np.linalg.norm(upd, axis=-1, keepdims=True)
    # a texel with a vanishing update keeps its old value
    safe = np.where(norm > 1e-12, upd / np.maximum(norm, 1e-300), cur)
    out[:, vis, :] = safe
    return out


class BackgroundBank:
    """Fixed-capacity FIFO of unit background features."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.data = np.zeros((self.capacity, self.dim))
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    @property
    def features(self) -> np.ndarray:
        if self.size < self.capacity:
            return self.data[: self.size]
        # oldest first
        return np.concatenate([self.data[self.cursor:], self.data[: self.cursor]])

    def features_tensor(self, dtype=None) -> torch.Tensor:
        return torch.as_tensor(self.features, dtype=dtype or default_dtype())

    def push(self, feats: np.ndarray) -> "BackgroundBank":
        feats = normalize(np.asarray(feats, dtype=np.float64).reshape(-1, self.dim))
        for f in feats:
            self.data[self.cursor] = f
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        return self

    def state(self) -> dict:
        return {"data": self.data.copy(), "size": self.size, "cursor": self.cursor}

    @classmethod
    def from_state(cls, data, size, cursor) -> "BackgroundBank":
        b = cls(len(data), data.shape[1])
        b.data = np.array(data, dtype=np.float64)
        b.size = int(size)
        b.cursor = int(cursor)
        return b


def push_background(bank: BackgroundBank, feats) -> BackgroundBank:
    return bank.push(feats)
