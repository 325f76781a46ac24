"""scikit-learn style estimators over the library.

``ShapeSpace`` fits a deformable template to exemplar meshes;
``TexturedMeshEstimator`` trains textures and extractor on posed images and
predicts class, pose and masks by render-and-compare.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import Config, desk_config
from .extractor import extract_features
from .geometry import FitConfig, Mesh, build_template, deform, fit_shape_space
from .inference import Prediction, predict_features
from .model import TexturedMeshModel, builtin_geometry, load_model, save_model
from .training import Trainer, train_epoch
from .validation import check_images, check_latents, check_meshes, check_records


class ShapeSpace(BaseEstimator):
    """Deformation field and scale fitted so latent ``e_k`` reproduces exemplar ``k``."""

    def __init__(self, template_level=4, hidden=128, layers=3, steps=400, lr=0.01, lambda_lap=0.3,
                 lambda_normal=0.1, random_state=0):
        self.template_level = template_level
        self.hidden = hidden
        self.layers = layers
        self.steps = steps
        self.lr = lr
        self.lambda_lap = lambda_lap
        self.lambda_normal = lambda_normal
        self.random_state = random_state

    def fit(self, X, y=None):
        meshes = check_meshes(X)
        self.template_ = build_template(self.template_level)
        cfg = FitConfig(steps=self.steps, lr=self.lr, lambda_lap=self.lambda_lap,
                        lambda_normal=self.lambda_normal, hidden=self.hidden, layers=self.layers,
                        seed=self.random_state)
        fit = fit_shape_space(meshes, self.template_, cfg)
        self.psi_ = fit.psi
        self.scale_ = fit.scale
        self.history_ = fit.history
        self.baseline_ = fit.baseline
        self.distances_ = fit.final
        self.n_latents_ = len(meshes)
        return self

    def transform(self, Z) -> np.ndarray:
        """Vertex arrays (n, V, 3) of the meshes for latents ``Z`` (n, K)."""
        check_is_fitted(self, "psi_")
        Z = check_latents(Z, self.n_latents_)
        with torch.no_grad():
            return np.stack([deform(self.template_, self.psi_, z, self.scale_).vertices.numpy() for z in Z])

    def mesh(self, z) -> Mesh:
        return Mesh(self.transform(z)[0], self.template_.faces, self.template_.uv)


class TexturedMeshEstimator(BaseEstimator):
    """Neural textured meshes for pose, shape, amodal masks and classes.

    ``fit(X, y)`` takes images (N, H, W, 3) and :class:`~texmesh.dataio.Record`
    targets (class, pose, latent index).  Class geometry is fitted from the
    built-in procedural exemplars unless ``geometry`` provides it.
    """

    def __init__(self, config: Config | None = None, geometry=None, epochs=None, random_state=0):
        self.config = config
        self.geometry = geometry
        self.epochs = epochs
        self.random_state = random_state

    def _config(self) -> Config:
        cfg = self.config if self.config is not None else desk_config()
        return cfg.replace(seed=self.random_state)

    def fit(self, X, y):
        cfg = self._config()
        X = check_images(X, cfg.stride, cfg.image_size)
        recs = check_records(y, len(X))
        names = sorted({r.cls for r in recs})
        geometry = self.geometry if self.geometry is not None else builtin_geometry(cfg, names)
        self.model_ = TexturedMeshModel(cfg, list(geometry))
        self.model_.init_appearance()
        self.trainer_ = Trainer(self.model_, X, recs)
        for _ in range(cfg.epochs if self.epochs is None else self.epochs):
            train_epoch(self.trainer_)
        self.classes_ = np.array(self.model_.class_names)
        self.history_ = list(self.trainer_.history)
        return self

    def transform(self, X) -> np.ndarray:
        """Unit feature maps (N, H/stride, W/stride, d)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.stride)
        self.model_.extractor.eval()
        return extract_features(self.model_.extractor, X)

    def predict_full(self, X, classes=None) -> list[Prediction]:
        feats = self.transform(X)
        return [predict_features(F, self.model_, classes) for F in feats]

    def predict(self, X) -> np.ndarray:
        return self.classes_[[p.cls for p in self.predict_full(X)]]

    def predict_pose(self, X) -> np.ndarray:
        """(N, 4) azimuth, elevation, theta (radians) and distance."""
        return np.stack([p.state.pose for p in self.predict_full(X)])

    def score(self, X, y) -> float:
        recs = check_records(y)
        return float(np.mean(self.predict(X) == np.array([r.cls for r in recs])))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_)

    @classmethod
    def load(cls, path) -> "TexturedMeshEstimator":
        model = load_model(path)
        est = cls(config=model.config, random_state=model.config.seed)
        est.model_ = model
        est.classes_ = np.array(model.class_names)
        est.history_ = list(model.history)
        return est
