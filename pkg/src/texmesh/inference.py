"""Multi-start render-and-compare inference.

The reconstruction loss averages per-pixel scores over the projected object
footprint O: ``f . f'`` where the pixel is explained by the rendered texture
(foreground) and the best background-bank similarity elsewhere, so a perfect
reconstruction scores 0 and orthogonal features score 1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as Fn

from .camera import Intrinsics, pose_to_extrinsics
from .config import Config
from .diffcore import Adam, default_dtype
from .extractor import extract_features
from .geometry import Mesh, one_hot
from .model import TexturedMeshModel
from .rasterizer import extrinsics_torch, render_surface, sample_texture
from .texture_model import viewing_coefficients
from .training import feature_intrinsics

log = logging.getLogger(__name__)

BACKGROUND, FOREGROUND, OCCLUDED = 0, 1, 2


@dataclass
class InferenceState:
    cls: int
    pose: np.ndarray  # azimuth, elevation, theta (rad), distance
    z: np.ndarray
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    loss: float = math.inf
    trace: list = field(default_factory=list)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def rotation(self) -> np.ndarray:
        return pose_to_extrinsics(*self.pose)[0]

    def copy(self) -> "InferenceState":
        return InferenceState(self.cls, self.pose.copy(), self.z.copy(), self.log_scale.copy(), self.loss,
                              list(self.trace))


@dataclass
class SegmentationResult:
    labels: np.ndarray  # (H, W) BACKGROUND / FOREGROUND / OCCLUDED

    @property
    def amodal(self) -> np.ndarray:
        return self.labels != BACKGROUND

    @property
    def visible(self) -> np.ndarray:
        return self.labels == FOREGROUND


# --------------------------------------------------------------------------- rendering


def _t(x, requires_grad=False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=default_dtype()).clone().requires_grad_(requires_grad)


def render_state(model: TexturedMeshModel, cls: int, pose, z, log_scale, K: Intrinsics, vertices=None):
    """Render features F' of a class under a (possibly differentiable) state.

    ``pose`` holds azimuth, elevation, theta and log-distance.  Returns
    ``(rendered (P, d), surface fragments)`` for the covered pixels.
    """
    geo = model.classes[cls]
    if vertices is None:
        vertices = geo.mesh(z, torch.exp(log_scale)).vertices
    R, t = extrinsics_torch(pose[0], pose[1], pose[2], torch.exp(pose[3]))
    surf = render_surface(vertices, geo.template.faces, geo.template.vertices, R, t, K)
    alpha = viewing_coefficients(surf.normal, surf.view, model.bins, model.config.temperature_T)
    tex = model.bank.tensor(cls, vertices.dtype)
    return (alpha[:, :, None] * sample_texture(tex, surf.uv)).sum(1), surf


def background_scores(F: torch.Tensor, model: TexturedMeshModel) -> torch.Tensor:
    """Best background-bank similarity per pixel, (H, W)."""
    B = model.background.features_tensor(F.dtype)
    if B.shape[0] == 0:
        return torch.full(F.shape[:2], -1.0, dtype=F.dtype)
    return (F.reshape(-1, F.shape[-1]) @ B.T).max(1).values.reshape(F.shape[:2])


def reconstruction_loss(F: torch.Tensor, rendered: torch.Tensor, pixels: np.ndarray, bg_score: torch.Tensor,
                        foreground: np.ndarray | None = None):
    """Loss and FG flags over the covered pixels.

    ``rendered`` (P, d) holds F' at the flat ``pixels``.  When ``foreground``
    (P,) is given the partition is held fixed; otherwise pixel i is
    foreground iff ``f_i . f'_i >= max_beta f_i . beta``.
    """
    if len(pixels) == 0:
        return torch.ones((), dtype=F.dtype), np.zeros(0, bool)
    idx = torch.as_tensor(pixels, dtype=torch.long)
    f = F.reshape(-1, F.shape[-1])[idx]
    fg_score = (f * rendered).sum(1)
    bg = bg_score.reshape(-1)[idx]
    if foreground is None:
        foreground = (fg_score >= bg).detach().numpy()
    fg = torch.as_tensor(foreground)
    score = torch.where(fg, fg_score, bg)
    return 1.0 - score.mean(), foreground


def segment_fgbg(F: torch.Tensor, rendered_map: torch.Tensor, bg_score: torch.Tensor,
                 covered: np.ndarray) -> SegmentationResult:
    """Label pixels of O as foreground when the model explains them at least as
    well as the background bank does; pixels outside O are background."""
    fg = ((F * rendered_map).sum(-1) >= bg_score).numpy()
    labels = np.full(covered.shape, BACKGROUND, dtype=np.int64)
    labels[covered & fg] = FOREGROUND
    labels[covered & ~fg] = OCCLUDED
    return SegmentationResult(labels)


# --------------------------------------------------------------------------- search and descent


def pose_grid(cfg: Config) -> np.ndarray:
    """(n, 3) initial azimuth, elevation, theta triples (radians)."""
    az = np.arange(cfg.init_azimuths) * 2 * math.pi / cfg.init_azimuths
    el = np.radians(np.linspace(cfg.elevation_min, cfg.elevation_max, cfg.init_elevations))
    th = np.radians(np.linspace(-cfg.theta_max, cfg.theta_max, cfg.init_thetas)) if cfg.init_thetas > 1 \
        else np.zeros(1)
    return np.array([(a, e, t) for a in az for e in el for t in th])


def init_search(F: torch.Tensor, model: TexturedMeshModel, cls: int, bg_score: torch.Tensor | None = None,
                grid: np.ndarray | None = None, latents=None) -> InferenceState:
    """Score every (grid pose, one-hot latent) pair and return the best as a state.

    Candidates are visited in order and only a strictly lower loss replaces
    the incumbent, so duplicates never change the result.
    """
    cfg = model.config
    K = feature_intrinsics(cfg)
    bg_score = background_scores(F, model) if bg_score is None else bg_score
    grid = pose_grid(cfg) if grid is None else np.asarray(grid)
    geo = model.classes[cls]
    latents = [one_hot(k, geo.latent_dim) for k in range(geo.latent_dim)] if latents is None else latents
    log_d = math.log(cfg.distance)
    best = InferenceState(cls, np.zeros(4), np.asarray(latents[0], float))
    with torch.no_grad():
        for z in latents:
            verts = geo.mesh(z).vertices
            for a, e, t in grid:
                pose = _t([a, e, t, log_d])
                rendered, surf = render_state(model, cls, pose, None, None, K, vertices=verts)
                loss, _ = reconstruction_loss(F, rendered, surf.pixels, bg_score)
                if float(loss) < best.loss:
                    best = InferenceState(cls, np.array([a, e, t, cfg.distance]), np.asarray(z, float),
                                          np.zeros(3), float(loss))
    return best


def project_simplex(z: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(z)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(z) + 1)
    rho = np.nonzero(u * k > css - 1)[0][-1]
    lam = (css[rho] - 1) / (rho + 1)
    return np.maximum(z - lam, 0)


def optimize(state: InferenceState, F: torch.Tensor, model: TexturedMeshModel, steps: int | None = None,
             lr: float | None = None, bg_score: torch.Tensor | None = None) -> InferenceState:
    """Adam on (pose, log-distance, z, log-scale), re-partitioning FG/BG every step.

    Returns the best state seen; its ``trace`` holds the best-so-far loss per
    step.  A non-finite loss or gradient stops the run.
    """
    cfg = model.config
    steps = cfg.inf_steps if steps is None else steps
    lr = cfg.inf_lr if lr is None else lr
    K = feature_intrinsics(cfg)
    bg_score = background_scores(F, model) if bg_score is None else bg_score
    pose = _t([*state.pose[:3], math.log(state.pose[3])], True)
    z = _t(state.z, True)
    log_s = _t(state.log_scale, True)
    opt = Adam([pose, z, log_s], lr=lr)
    best = state.copy()
    best.trace = []
    for _ in range(steps):
        rendered, surf = render_state(model, state.cls, pose, z, log_s, K)
        loss, _ = reconstruction_loss(F, rendered, surf.pixels, bg_score)
        value = float(loss.detach())
        if not math.isfinite(value):
            log.warning("non-finite reconstruction loss; keeping best state")
            break
        if value < best.loss:
            best = InferenceState(state.cls, _pose_of(pose), z.detach().numpy().copy(),
                                  log_s.detach().numpy().copy(), value, best.trace)
        best.trace.append(best.loss)
        opt.zero_grad()
        loss.backward()
        if not all(bool(torch.isfinite(p.grad).all()) for p in (pose, z, log_s)):
            log.warning("non-finite gradient; keeping best state")
            break
        opt.step()
        if cfg.simplex_latent:
            with torch.no_grad():
                z.copy_(torch.as_tensor(project_simplex(z.numpy())))
    return best


def _pose_of(p: torch.Tensor) -> np.ndarray:
    v = p.detach().numpy().copy()
    v[3] = math.exp(v[3])
    return v


def classify(losses) -> tuple[int, bool]:
    """Index of the smallest loss (lowest index on ties) and a tie flag."""
    losses = np.asarray(losses, dtype=np.float64)
    best = int(np.argmin(losses))
    return best, bool((losses == losses[best]).sum() > 1)


# --------------------------------------------------------------------------- full prediction


@dataclass
class Prediction:
    cls: int
    state: InferenceState
    losses: list  # per candidate class, in class order
    segmentation: SegmentationResult
    tie: bool = False
    states: list = field(default_factory=list)


def full_segmentation(F: torch.Tensor, model: TexturedMeshModel, state: InferenceState) -> SegmentationResult:
    """FG/BG/background labels at image resolution.

    The footprint O is rasterized at full resolution; image features are
    bilinearly upsampled (and renormalized) to compare against F' rendered
    at the same resolution.
    """
    cfg = model.config
    H = W = cfg.image_size
    K = Intrinsics(cfg.focal, H, W)
    with torch.no_grad():
        pose = _t([*state.pose[:3], math.log(state.pose[3])])
        rendered, surf = render_state(model, state.cls, pose, _t(state.z), _t(state.log_scale), K)
        up = Fn.interpolate(F.permute(2, 0, 1)[None], size=(H, W), mode="bilinear", align_corners=False)
        up = Fn.normalize(up[0].permute(1, 2, 0), dim=-1, eps=1e-12)
        Fr = torch.zeros(H * W, up.shape[-1], dtype=up.dtype)
        Fr[torch.as_tensor(surf.pixels, dtype=torch.long)] = rendered
        return segment_fgbg(up, Fr.reshape(H, W, -1), background_scores(up, model), surf.mask)


def feature_segmentation(F: torch.Tensor, model: TexturedMeshModel, state: InferenceState) -> SegmentationResult:
    K = feature_intrinsics(model.config)
    with torch.no_grad():
        pose = _t([*state.pose[:3], math.log(state.pose[3])])
        rendered, surf = render_state(model, state.cls, pose, _t(state.z), _t(state.log_scale), K)
        h, w = surf.shape
        Fr = torch.zeros(h * w, F.shape[-1], dtype=F.dtype)
        Fr[torch.as_tensor(surf.pixels, dtype=torch.long)] = rendered
        return segment_fgbg(F, Fr.reshape(h, w, -1), background_scores(F, model), surf.mask)


def predict_features(F, model: TexturedMeshModel, classes=None) -> Prediction:
    """Search, refine and compare every candidate class on one feature map."""
    F = torch.as_tensor(np.asarray(F), dtype=default_dtype())
    classes = list(range(len(model.classes))) if classes is None else list(classes)
    bg = background_scores(F, model)
    states = []
    for c in classes:
        s0 = init_search(F, model, c, bg)
        states.append(optimize(s0, F, model, bg_score=bg))
    losses = [s.loss for s in states]
    k, tie = classify(losses)
    if tie:
        log.warning("classification tie between classes %s", [classes[i] for i in np.flatnonzero(
            np.asarray(losses) == losses[k])])
    best = states[k]
    seg = full_segmentation(F, model, best) if model.config.full_res_segmentation else \
        feature_segmentation(F, model, best)
    return Prediction(classes[k], best, losses, seg, tie, states)


def predict_image(image, model: TexturedMeshModel, classes=None) -> Prediction:
    model.extractor.eval()
    return predict_features(extract_features(model.extractor, image)[0], model, classes)


# --------------------------------------------------------------------------- export

SEG_COLORS = {"visible": (0.2, 0.8, 0.2), "occluded": (0.85, 0.15, 0.15), "invisible": (0.5, 0.5, 0.5)}


def surface_labels(model: TexturedMeshModel, state: InferenceState, seg: SegmentationResult, q: int | None = None):
    """Segmentation splatted to texture space: 0 visible, 1 occluded, -1 unseen."""
    from .surface_transfer import transfer_segmentation

    cfg = model.config
    H, W = seg.labels.shape
    K = Intrinsics(cfg.focal, cfg.image_size, cfg.image_size).scaled(H, W)
    with torch.no_grad():
        pose = _t([*state.pose[:3], math.log(state.pose[3])])
        _, surf = render_state(model, state.cls, pose, _t(state.z), _t(state.log_scale), K)
    U = np.zeros((H * W, 2))
    U[surf.pixels] = surf.uv.numpy()
    lab = np.where(seg.labels == FOREGROUND, 0, 1).reshape(-1)
    return transfer_segmentation(U.reshape(H, W, 2), surf.mask, lab.reshape(H, W), 2,
                                 q or cfg.texture_size, cfg.skip_extent)


def colored_mesh(model: TexturedMeshModel, state: InferenceState, seg: SegmentationResult) -> Mesh:
    """Fitted mesh with per-vertex colours for visible / occluded / unseen surface."""
    geo = model.classes[state.cls]
    with torch.no_grad():
        verts = geo.mesh(state.z, np.exp(state.log_scale)).vertices.numpy()
    labels = surface_labels(model, state, seg)
    q = labels.shape[0]
    uv = geo.template.uv
    r = np.clip((uv[:, 1] * q).astype(int), 0, q - 1)
    c = np.mod((uv[:, 0] * q).astype(int), q)
    vl = labels[r, c]
    colors = np.empty((len(verts), 3))
    colors[:] = SEG_COLORS["invisible"]
    colors[vl == 0] = SEG_COLORS["visible"]
    colors[vl == 1] = SEG_COLORS["occluded"]
    return Mesh(verts, geo.template.faces, uv, colors)


def pose_record(pred: Prediction, model: TexturedMeshModel, image_id: str = "") -> dict:
    s = pred.state
    return {
        "id": image_id,
        "class": model.class_names[pred.cls],
        "azimuth": math.degrees(s.pose[0]),
        "elevation": math.degrees(s.pose[1]),
        "theta": math.degrees(s.pose[2]),
        "distance": float(s.pose[3]),
        "rotation": [[float(x) for x in row] for row in s.rotation],
        "latent": [float(x) for x in s.z],
        "scale": [float(x) for x in s.scale],
        "loss": float(s.loss),
        "class_losses": {model.class_names[c]: float(l) for c, l in
                         zip([st.cls for st in pred.states], pred.losses)},
        "tie": pred.tie,
    }


def export_results(pred: Prediction, model: TexturedMeshModel, out_dir, image_id: str) -> dict:
    """Write masks (PNG) and the coloured mesh (OBJ); return the pose record."""
    from pathlib import Path

    from .dataio import write_png
    from .mesh_io import write_obj

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    rec = pose_record(pred, model, image_id)
    write_png(out / "masks" / f"{image_id}_amodal.png", pred.segmentation.amodal)
    write_png(out / "masks" / f"{image_id}_visible.png", pred.segmentation.visible)
    write_obj(out / "meshes" / f"{image_id}.obj", colored_mesh(model, pred.state, pred.segmentation))
    rec["mask"] = f"masks/{image_id}_amodal.png"
    rec["visible_mask"] = f"masks/{image_id}_visible.png"
    rec["mesh"] = f"meshes/{image_id}.obj"
    return rec
