"""EM-style training of the feature extractor and the neural textures.

Per batch the extractor is updated by one Adam step on the contrastive loss,
computed against the banks as they were before the batch.  The banks are then
updated from the same (detached) features: textures by momentum, the
background bank by FIFO pushes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import binary_dilation
from torch.nn import functional as Fn

from .camera import Intrinsics, pose_to_extrinsics
from .config import Config
from .dataio import Record
from .diffcore import Adam, NonFiniteError, default_dtype, exponential_lr
from .geometry import one_hot
from .model import TexturedMeshModel
from .rasterizer import render_surface
from .texture_model import momentum_update, normalize, viewing_coefficients
from .surface_transfer import build_lookup, splat_matrix

log = logging.getLogger(__name__)


def feature_intrinsics(cfg: Config) -> Intrinsics:
    """Camera of the stride-reduced feature grid (same field of view)."""
    return Intrinsics(cfg.focal, cfg.image_size, cfg.image_size).scaled(cfg.feature_size, cfg.feature_size)


# --------------------------------------------------------------------------- per-sample geometry


@dataclass
class SampleCache:
    """Ground-truth-pose geometry of one training image at feature resolution."""

    cls: int
    mask: np.ndarray  # (h, w) on-object pixels
    splat: torch.Tensor  # sparse (q*q, h*w)
    visible: np.ndarray  # (n_vis,) flat texel indices
    alpha_tex: np.ndarray  # (q, q, b) splatted viewing coefficients
    background: np.ndarray  # flat indices of off-object pixels


def build_cache(model: TexturedMeshModel, record: Record, cls: int) -> SampleCache:
    cfg = model.config
    geo = model.classes[cls]
    K = feature_intrinsics(cfg)
    with torch.no_grad():
        mesh = geo.mesh(one_hot(record.latent, geo.latent_dim))
        R, t = pose_to_extrinsics(*record.pose)
        dt = default_dtype()
        surf = render_surface(mesh.vertices, mesh.faces, mesh.template, torch.as_tensor(R, dtype=dt),
                              torch.as_tensor(t, dtype=dt), K)
        alpha = viewing_coefficients(surf.normal, surf.view, model.bins, cfg.temperature_T).numpy()
    h, w = surf.shape
    U = np.zeros((h * w, 2))
    U[surf.pixels] = surf.uv.numpy()
    U = U.reshape(h, w, 2)
    lookup = build_lookup(U, surf.mask, cfg.texture_size, cfg.skip_extent)
    S = splat_matrix(lookup).tocoo()
    splat = torch.sparse_coo_tensor(np.stack([S.row, S.col]), S.data, S.shape, dtype=dt,
                                    check_invariants=False).coalesce()
    A = np.zeros((h * w, alpha.shape[1]))
    A[surf.pixels] = alpha
    q = cfg.texture_size
    alpha_tex = (splat_matrix(lookup) @ A).reshape(q, q, -1)
    visible = np.flatnonzero(lookup.count.reshape(-1) > 0)
    # features next to the silhouette see the object through their receptive field
    near = binary_dilation(surf.mask, iterations=cfg.bg_margin) if cfg.bg_margin > 0 else surf.mask
    background = np.flatnonzero(~near.reshape(-1))
    return SampleCache(cls, surf.mask, splat, visible, alpha_tex, background)


# --------------------------------------------------------------------------- sampling and losses


@dataclass
class SampleSet:
    positives: np.ndarray  # (P,) flat texel indices, all visible
    negatives: np.ndarray  # (N,) flat texel indices
    valid: np.ndarray  # (P, N) negative farther than tau from the positive
    empty: int = 0  # positives whose negative set is empty


def texel_uv(idx: np.ndarray, q: int) -> np.ndarray:
    r, c = np.divmod(np.asarray(idx), q)
    return np.stack([(c + 0.5) / q, (r + 0.5) / q], -1)


def uv_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise UV distance with u wrapping around the seam; (n, 2) x (m, 2) -> (n, m)."""
    du = np.abs(a[:, None, 0] - b[None, :, 0])
    du = np.minimum(du, 1.0 - du)
    dv = a[:, None, 1] - b[None, :, 1]
    return np.sqrt(du**2 + dv**2)


def sample_positives_negatives(visible, q: int, n_pos: int, n_neg: int, tau: float,
                               rng: np.random.Generator) -> SampleSet:
    """Uniform positives from the visible texels and a shared negative pool.

    ``visible`` is either a (q, q) mask or flat texel indices.  Positives are
    drawn without replacement when enough texels are visible.  Negatives are
    drawn uniformly over all texels; ``valid[p, n]`` keeps those farther than
    ``tau`` from positive ``p``.
    """
    vis = np.asarray(visible)
    vis = np.flatnonzero(vis.reshape(-1)) if vis.dtype == bool else vis.astype(np.int64)
    if len(vis) == 0:
        raise ValueError("no visible texels to sample from")
    pos = rng.choice(vis, size=n_pos, replace=len(vis) < n_pos)
    neg = rng.choice(q * q, size=n_neg, replace=q * q < n_neg)
    valid = uv_distance(texel_uv(pos, q), texel_uv(neg, q)) > tau
    return SampleSet(pos, neg, valid, int((~valid.any(1)).sum()))


def loss_ml(F_hat, textures, alpha, visible, sigma: float = 1.0):
    """Gaussian negative log-likelihood of visible surface features (constant dropped).

    ``F_hat`` (q, q, d); ``textures`` (b, q, q, d); ``alpha`` (q, q, b).
    """
    F_hat = torch.as_tensor(F_hat, dtype=default_dtype())
    tex = torch.as_tensor(textures, dtype=F_hat.dtype)
    a = torch.as_tensor(alpha, dtype=F_hat.dtype)
    vis = torch.as_tensor(np.asarray(visible, bool))
    theta = torch.einsum("qrb,bqrd->qrd", a, tex)
    sq = ((F_hat - theta) ** 2).sum(-1)
    return sq[vis].sum() / (2 * sigma**2)


def combined_contrastive_loss(pos_sim: torch.Tensor, neg_sims, temperature: float = 0.07,
                              masks=None) -> torch.Tensor:
    """Cross-entropy selecting the positive among ``[pos, negatives...]``, summed over positives.

    ``pos_sim`` (P,); ``neg_sims`` is a list of (P, N_i) similarity blocks
    (object, class and background negatives).  ``masks`` optionally marks the
    valid entries of each block.
    """
    blocks = [pos_sim[:, None]]
    for i, s in enumerate(neg_sims):
        if s is None or s.shape[1] == 0:
            continue
        if masks is not None and masks[i] is not None:
            s = s.masked_fill(~torch.as_tensor(masks[i]), -math.inf)
        blocks.append(s)
    logits = torch.cat(blocks, 1) / temperature
    return -(logits[:, 0] - torch.logsumexp(logits, 1)).sum()


def _combined_sim(f: torch.Tensor, alpha: torch.Tensor, tex: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of ``f`` (P, d) with alpha-combined texels.

    ``alpha`` (P, b) mixes the bins of texels ``tex`` (b, N, d); the combined
    vector of each (positive, texel) pair is normalized.
    """
    raw = torch.einsum("pd,bnd->pnb", f, tex)
    gram = torch.einsum("bnd,cnd->nbc", tex, tex)
    sq = torch.einsum("pb,nbc,pc->pn", alpha, gram, alpha)
    return (raw * alpha[:, None, :]).sum(-1) / sq.clamp_min(1e-24).sqrt()


@dataclass
class StepStats:
    loss: float = 0.0
    pos_sim: float = 0.0
    neg_sim: float = 0.0
    bg_sim: float = 0.0
    n: int = 0
    empty_negatives: int = 0


def sample_loss(F_img: torch.Tensor, cache: SampleCache, model: TexturedMeshModel, rng: np.random.Generator,
                stats: StepStats | None = None):
    """Contrastive loss of one image; returns ``(loss, detached surface features (q, q, d))``."""
    cfg = model.config
    q = cfg.texture_size
    d = F_img.shape[-1]
    F_hat = torch.sparse.mm(cache.splat, F_img.reshape(-1, d))  # (q*q, d)
    S = sample_positives_negatives(cache.visible, q, cfg.n_pos, cfg.n_neg, cfg.tau, rng)
    f = Fn.normalize(F_hat[torch.as_tensor(S.positives)], dim=1, eps=1e-12)
    tex_all = model.bank.textures
    tex = torch.as_tensor(tex_all[cache.cls].reshape(tex_all.shape[1], q * q, d), dtype=f.dtype)
    alpha = torch.as_tensor(cache.alpha_tex.reshape(q * q, -1)[S.positives], dtype=f.dtype)
    alpha = alpha / alpha.sum(1, keepdim=True).clamp_min(1e-12)
    theta = Fn.normalize(torch.einsum("pb,bpd->pd", alpha, tex[:, S.positives]), dim=1, eps=1e-12)
    pos_sim = (f * theta).sum(1)
    obj = _combined_sim(f, alpha, tex[:, S.negatives])
    blocks, masks = [obj], [S.valid]
    others = [c for c in range(model.bank.n_classes) if c != cache.cls]
    if others and cfg.n_class_neg > 0:
        oc = rng.choice(others, size=cfg.n_class_neg)
        ot = rng.integers(q * q, size=cfg.n_class_neg)
        ctex = torch.as_tensor(tex_all[oc, :, ot // q, ot % q].transpose(1, 0, 2), dtype=f.dtype)
        blocks.append(_combined_sim(f, alpha, ctex))
        masks.append(None)
    bg_sim = None
    if len(model.background):
        bg_sim = f @ model.background.features_tensor(f.dtype).T
        blocks.append(bg_sim)
        masks.append(None)
    loss = combined_contrastive_loss(pos_sim, blocks, cfg.ce_temperature, masks)
    if stats is not None:
        with torch.no_grad():
            stats.loss += float(loss)
            stats.pos_sim += float(pos_sim.mean())
            v = torch.as_tensor(S.valid)
            stats.neg_sim += float(obj[v].mean()) if bool(v.any()) else 0.0
            if bg_sim is not None:
                stats.bg_sim += float(bg_sim.max(1).values.mean())
            stats.n += 1
            stats.empty_negatives += S.empty
    return loss, F_hat.detach().reshape(q, q, d)


def update_banks(model: TexturedMeshModel, cache: SampleCache, F_hat: torch.Tensor, F_img: torch.Tensor,
                 rng: np.random.Generator) -> None:
    """Momentum update of the class texture and FIFO push of background features."""
    cfg = model.config
    q = cfg.texture_size
    vis = np.zeros(q * q, bool)
    vis[cache.visible] = True
    surface = normalize(F_hat.numpy())
    model.bank.textures[cache.cls] = momentum_update(model.bank.textures[cache.cls], surface, vis.reshape(q, q),
                                                     cache.alpha_tex, cfg.momentum)
    bg = cache.background
    if len(bg):
        take = rng.choice(bg, size=min(cfg.bg_per_image, len(bg)), replace=False)
        model.background.push(F_img.detach().reshape(-1, F_img.shape[-1])[torch.as_tensor(take)].numpy())


# --------------------------------------------------------------------------- loop


@dataclass
class Trainer:
    model: TexturedMeshModel
    images: np.ndarray  # (N, H, W, 3) uint8
    records: list[Record]
    caches: list[SampleCache] = field(default_factory=list)
    optimizer: Adam | None = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        names = self.model.class_names
        missing = sorted({r.cls for r in self.records} - set(names))
        if missing:
            raise ValueError(f"records reference classes without geometry: {missing}")
        if self.model.bank is None:
            self.model.init_appearance()
        if not self.caches:
            self.caches = [build_cache(self.model, r, names.index(r.cls)) for r in self.records]
        if self.optimizer is None:
            cfg = self.model.config
            self.optimizer = Adam(list(self.model.extractor.parameters()), lr=cfg.lr)

    def run_epoch(self) -> dict:
        return train_epoch(self)


def train_epoch(trainer: Trainer) -> dict:
    """One pass over the data in a seeded random order; returns epoch metrics."""
    model = trainer.model
    cfg = model.config
    ext = model.extractor
    opt = trainer.optimizer
    opt.lr = exponential_lr(cfg.lr, cfg.lr_decay, trainer.epoch)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, trainer.epoch]))
    order = rng.permutation(len(trainer.records))
    stats = StepStats()
    ext.train()
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        x = torch.as_tensor(trainer.images[idx], dtype=default_dtype()) / 255.0
        feats = ext(x)
        total = 0.0
        surfaces = []
        for k, i in enumerate(idx):
            loss, F_hat = sample_loss(feats[k], trainer.caches[i], model, rng, stats)
            if not math.isfinite(float(loss.detach())):
                raise NonFiniteError(f"non-finite loss on sample {trainer.records[i].id or i}")
            total = total + loss
            surfaces.append(F_hat)
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            for k, i in enumerate(idx):
                update_banks(model, trainer.caches[i], surfaces[k], feats[k].detach(), rng)
    n = max(stats.n, 1)
    row = {"epoch": trainer.epoch, "loss": stats.loss / n, "pos_sim": stats.pos_sim / n,
           "neg_sim": stats.neg_sim / n, "bg_sim": stats.bg_sim / n}
    if stats.empty_negatives:
        log.info("epoch %d: %d positives without object negatives", trainer.epoch, stats.empty_negatives)
    trainer.history.append(row)
    model.history.append(row)
    trainer.epoch += 1
    log.info("epoch %(epoch)d loss %(loss).4f pos %(pos_sim).3f neg %(neg_sim).3f", row)
    return row


def train(model: TexturedMeshModel, images: np.ndarray, records: list[Record], epochs: int | None = None,
          callback=None) -> Trainer:
    trainer = Trainer(model, images, records)
    for _ in range(model.config.epochs if epochs is None else epochs):
        row = train_epoch(trainer)
        if callback is not None:
            callback(row)
    return trainer
