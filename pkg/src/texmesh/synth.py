"""Procedural synthetic scenes with exact pose, mask and occluder ground truth.

Objects are the built-in superellipsoid classes painted with a smooth,
class-specific colour field over the sphere anchor, rendered in front of
natural-noise backgrounds.  Occlusion levels paste a rectangular noise patch
whose size is tuned to cover a fixed fraction of the object mask.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .camera import Intrinsics, pose_to_extrinsics
from .config import Config
from .dataio import Record, write_manifest, write_png
from .geometry import vertex_normals
from .rasterizer import rasterize
from .shapes import BUILTIN_CLASSES, exemplar_mesh

OCCLUSION_COVERAGE = {0: 0.0, 1: 0.2, 2: 0.4, 3: 0.6}
RENDER_LEVEL = 4
ELEVATION_RANGE = (-10.0, 40.0)  # degrees
THETA_RANGE = 10.0


@dataclass
class SynthDataset:
    records: list[Record]
    images: np.ndarray  # (N, H, W, 3) uint8
    amodal: np.ndarray  # (N, H, W) bool
    visible: np.ndarray  # (N, H, W) bool
    coverage: np.ndarray  # (N,) occluder fraction of the object mask

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset([self.records[i] for i in idx], self.images[idx], self.amodal[idx],
                            self.visible[idx], self.coverage[idx])

    def write(self, out_dir) -> Path:
        """Write PNGs and ``manifest.jsonl`` (paths relative to ``out_dir``)."""
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        rows = []
        for r, img, am, vis in zip(self.records, self.images, self.amodal, self.visible):
            rel = Record(**{**r.__dict__, "image": f"images/{r.id}.png", "mask": f"masks/{r.id}_amodal.png",
                            "visible_mask": f"masks/{r.id}_visible.png"})
            write_png(out / rel.image, img)
            write_png(out / rel.mask, am)
            write_png(out / rel.visible_mask, vis)
            rows.append(rel)
        path = out / "manifest.jsonl"
        write_manifest(path, rows)
        return path


def _class_rng(name: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(name.encode()))


def class_colors(name: str, directions: np.ndarray) -> np.ndarray:
    """Smooth RGB field in [0.05, 0.95] over unit directions, fixed per class."""
    rng = _class_rng(name)
    n = 5
    freq = rng.uniform(2.5, 6.0, size=(3, n))
    axes = rng.standard_normal((3, n, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=(3, n))
    out = np.zeros((len(directions), 3))
    for ch in range(3):
        acc = np.zeros(len(directions))
        for k in range(n):
            acc += np.sin(freq[ch, k] * directions @ axes[ch, k] + phase[ch, k])
        out[:, ch] = 0.5 + 0.45 * np.tanh(acc / 1.5)
    return out


def natural_noise(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """1/f-like coloured noise in [0, 1], (H, W, 3)."""
    acc = np.zeros((H, W, 3))
    for sigma in (1.0, 2.0, 4.0, 8.0, 16.0):
        layer = gaussian_filter(rng.standard_normal((H, W, 3)), (sigma, sigma, 0), mode="wrap")
        layer /= layer.std() + 1e-12
        acc += layer
    mix = rng.uniform(-1, 1, size=(3, 3)) + np.eye(3)
    acc = acc @ mix.T
    lo, hi = np.percentile(acc, 1), np.percentile(acc, 99)
    return np.clip((acc - lo) / max(hi - lo, 1e-12), 0, 1)


def render_object(name: str, latent: int, pose, K: Intrinsics):
    """RGB (H, W, 3) float and amodal mask of one exemplar under ``pose``."""
    mesh, anchors = exemplar_mesh(BUILTIN_CLASSES[name][latent], RENDER_LEVEL)
    R, t = pose_to_extrinsics(*pose)
    frags = rasterize(mesh.vertices, mesh.faces, R, t, K)
    m = frags.mask
    rgb = np.zeros(frags.shape + (3,))
    if m.any():
        tri = mesh.faces[frags.face_idx[m]]
        b = frags.bary[m]
        d = np.einsum("pk,pkc->pc", b, anchors[tri])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        vn = vertex_normals(torch.as_tensor(mesh.vertices), mesh.faces).numpy()
        n = np.einsum("pk,pkc->pc", b, vn[tri])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        pos = np.einsum("pk,pkc->pc", b, mesh.vertices[tri])
        view = -(R.T @ t)[None] - pos
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        shade = 0.6 + 0.4 * np.abs((n * view).sum(1))
        rgb[m] = class_colors(name, d) * shade[:, None]
    return rgb, m


def place_occluder(amodal: np.ndarray, target: float, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned rectangle centred on an object pixel covering ~``target`` of it.

    Coverage grows monotonically with the rectangle's size, so the half-size is
    found by bisection.
    """
    H, W = amodal.shape
    occ = np.zeros_like(amodal)
    if target <= 0 or not amodal.any():
        return occ
    ys, xs = np.nonzero(amodal)
    k = rng.integers(len(ys))
    ci, cj = ys[k] + 0.5, xs[k] + 0.5
    aspect = rng.uniform(0.6, 1.6)
    area = amodal.sum()
    rows = np.arange(H)[:, None] + 0.5
    cols = np.arange(W)[None, :] + 0.5

    def rect(s):
        return (np.abs(rows - ci) <= s) & (np.abs(cols - cj) <= s * aspect)

    lo, hi = 0.0, float(max(H, W)) * 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if (rect(mid) & amodal).sum() / area >= target:
            hi = mid
        else:
            lo = mid
    return rect(hi)


def sample_pose(rng: np.random.Generator, cfg: Config) -> tuple[float, float, float, float]:
    az = rng.uniform(0, 2 * np.pi)
    el = math.radians(rng.uniform(*ELEVATION_RANGE))
    th = math.radians(rng.uniform(-THETA_RANGE, THETA_RANGE))
    d = cfg.distance * (1 + rng.uniform(-cfg.distance_jitter, cfg.distance_jitter))
    return az, el, th, d


def synth_gen(cfg: Config, seed: int = 0, classes: list[str] | None = None, n_per_class: int | None = None,
              occlusion_level: int | None = None, out_dir=None, prefix: str = "") -> SynthDataset:
    """Generate a dataset; identical arguments give bit-identical output."""
    classes = list(classes or BUILTIN_CLASSES)
    unknown = [c for c in classes if c not in BUILTIN_CLASSES]
    if unknown:
        raise ValueError(f"unknown classes {unknown}; built-in: {list(BUILTIN_CLASSES)}")
    n = cfg.n_per_class if n_per_class is None else int(n_per_class)
    level = cfg.occlusion_level if occlusion_level is None else int(occlusion_level)
    if level not in OCCLUSION_COVERAGE:
        raise ValueError("occlusion level must be 0..3")
    H = W = cfg.image_size
    K = Intrinsics(cfg.focal, H, W)
    children = np.random.SeedSequence([seed, level]).spawn(len(classes) * n)
    records, images, amodals, visibles, cover = [], [], [], [], []
    for ci, name in enumerate(classes):
        n_latent = len(BUILTIN_CLASSES[name])
        for i in range(n):
            rng = np.random.default_rng(children[ci * n + i])
            latent = int(rng.integers(n_latent))
            pose = sample_pose(rng, cfg)
            rgb, amodal = render_object(name, latent, pose, K)
            bg = natural_noise(rng, H, W)
            img = np.where(amodal[..., None], rgb, bg)
            occ = place_occluder(amodal, OCCLUSION_COVERAGE[level], rng)
            if occ.any():
                img = np.where(occ[..., None], natural_noise(rng, H, W), img)
            vis = amodal & ~occ
            cov = float((occ & amodal).sum() / max(amodal.sum(), 1))
            sid = f"{prefix}{name}_L{level}_{i:04d}"
            records.append(Record(image="", cls=name, azimuth=pose[0], elevation=pose[1], theta=pose[2],
                                  distance=pose[3], latent=latent, occlusion=level, id=sid,
                                  extra={"coverage": round(cov, 6)}))
            images.append((img * 255 + 0.5).astype(np.uint8))
            amodals.append(amodal)
            visibles.append(vis)
            cover.append(cov)
    ds = SynthDataset(records, np.stack(images), np.stack(amodals), np.stack(visibles), np.array(cover))
    if out_dir is not None:
        ds.write(out_dir)
    return ds
