"""Trained-model container and its single-file serialization."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import Config, make_config
from .diffcore import default_dtype, dtype_of
from .extractor import FeatureExtractor
from .geometry import DeformableMesh, DeformationField, TemplateSphere, build_template, deform
from .texture_model import BackgroundBank, NeuralTextureBank, ViewingBinSet

FORMAT = "texmesh-model"
VERSION = 1


@dataclass
class ClassGeometry:
    name: str
    psi: DeformationField
    scale: np.ndarray
    template: TemplateSphere

    @property
    def latent_dim(self) -> int:
        return self.psi.latent_dim

    def mesh(self, z, instance_scale=None) -> DeformableMesh:
        s = torch.as_tensor(self.scale, dtype=default_dtype())
        if instance_scale is not None:
            s = s * torch.as_tensor(instance_scale, dtype=default_dtype())
        return deform(self.template, self.psi, z, s)


@dataclass
class TexturedMeshModel:
    config: Config
    classes: list[ClassGeometry]
    bank: NeuralTextureBank | None = None
    background: BackgroundBank | None = None
    bins: ViewingBinSet | None = None
    extractor: FeatureExtractor | None = None
    history: list = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def init_appearance(self, rng: np.random.Generator | None = None) -> None:
        cfg = self.config
        rng = rng or np.random.default_rng(cfg.seed)
        self.bins = ViewingBinSet.build(cfg.n_bins, cfg.bin_angle)
        self.bank = NeuralTextureBank(len(self.classes), cfg.n_bins, cfg.texture_size, cfg.feature_dim, rng)
        self.background = BackgroundBank(cfg.bg_capacity, cfg.feature_dim)
        torch.manual_seed(cfg.seed)
        self.extractor = FeatureExtractor(cfg.feature_dim, cfg.stride, cfg.channels, dtype=dtype_of(cfg.precision))


def save_model(path, model: TexturedMeshModel) -> None:
    arrays = {}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "classes": [],
        "history": model.history,
    }
    for i, c in enumerate(model.classes):
        meta["classes"].append({"name": c.name, "latent_dim": c.psi.latent_dim, "hidden": c.psi.hidden,
                                "layers": c.psi.layers, "level": c.template.level})
        arrays[f"scale/{i}"] = np.asarray(c.scale, dtype=np.float64)
        for k, v in c.psi.state_dict().items():
            arrays[f"psi/{i}/{k}"] = v.detach().cpu().numpy()
    if model.bank is not None:
        arrays["textures"] = model.bank.textures
        arrays["bins"] = model.bins.rotvecs
    if model.background is not None:
        st = model.background.state()
        arrays["background"] = st["data"]
        meta["background"] = {"size": st["size"], "cursor": st["cursor"]}
    if model.extractor is not None:
        meta["extractor"] = model.extractor.config()
        for k, v in model.extractor.state_dict().items():
            arrays[f"extractor/{k}"] = v.detach().cpu().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> TexturedMeshModel:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a model file")
    if meta.get("version") != VERSION:
        raise ValueError(f"unsupported model version {meta.get('version')}")
    cfg = make_config(meta["config"], env=False)
    classes = []
    templates = {}
    for i, cm in enumerate(meta["classes"]):
        psi = DeformationField(cm["latent_dim"], cm["hidden"], cm["layers"])
        prefix = f"psi/{i}/"
        psi.load_state_dict({k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)})
        lvl = cm["level"]
        if lvl not in templates:
            templates[lvl] = build_template(lvl)
        classes.append(ClassGeometry(cm["name"], psi, arrays[f"scale/{i}"], templates[lvl]))
    model = TexturedMeshModel(cfg, classes, history=meta.get("history", []))
    if "textures" in arrays:
        model.bank = NeuralTextureBank(0, 0, 0, 0, textures=arrays["textures"])
        model.bins = ViewingBinSet(arrays["bins"])
    if "background" in arrays:
        bg = meta["background"]
        model.background = BackgroundBank.from_state(arrays["background"], bg["size"], bg["cursor"])
    if "extractor" in meta:
        ex = meta["extractor"]
        model.extractor = FeatureExtractor(ex["dim"], ex["stride"], ex["channels"], dtype=dtype_of(cfg.precision))
        model.extractor.load_state_dict({k[len("extractor/"):]: torch.as_tensor(v)
                                         for k, v in arrays.items() if k.startswith("extractor/")})
    return model


def fit_class_geometry(name: str, exemplars, cfg: Config, template: TemplateSphere | None = None) -> ClassGeometry:
    """Fit the deformation field and scale of one class from its exemplar meshes."""
    from .geometry import FitConfig, fit_shape_space

    template = template or build_template(cfg.template_level)
    fit = fit_shape_space(list(exemplars), template,
                          FitConfig(steps=cfg.fit_steps, lr=cfg.fit_lr, lambda_lap=cfg.lambda_lap,
                                    lambda_normal=cfg.lambda_normal, hidden=cfg.psi_hidden,
                                    layers=cfg.psi_layers, seed=cfg.seed))
    for p in fit.psi.parameters():
        p.requires_grad_(False)
    geo = ClassGeometry(name, fit.psi, fit.scale, template)
    geo.fit = fit
    return geo


def builtin_geometry(cfg: Config, classes=None) -> list[ClassGeometry]:
    """Fitted geometry for the procedural classes in :mod:`texmesh.shapes`."""
    from .shapes import BUILTIN_CLASSES, class_exemplars

    template = build_template(cfg.template_level)
    return [fit_class_geometry(n, class_exemplars(n, cfg.template_level), cfg, template)
            for n in (classes or list(BUILTIN_CLASSES))]
