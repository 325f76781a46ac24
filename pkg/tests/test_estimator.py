import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from texmesh.estimator import ShapeSpace, TexturedMeshEstimator
from texmesh.geometry import mesh_distance
from texmesh.shapes import ellipsoid, sphere
from texmesh.synth import synth_gen


def test_shape_space_params_and_clone():
    est = ShapeSpace(template_level=1, hidden=8, steps=3)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform([[1.0]])


def test_shape_space_fit_transform():
    targets = [sphere(1.0, 2), ellipsoid((1.0, 0.5, 0.5), 2)]
    est = ShapeSpace(template_level=2, hidden=16, layers=2, steps=40).fit(targets)
    V = est.transform(np.eye(2))
    assert V.shape == (2, 162, 3)
    assert mesh_distance(est.mesh([0, 1]), targets[1]) < est.baseline_[1]
    with pytest.raises(ValueError):
        est.transform([[1.0, 0.0, 0.0]])


def test_textured_estimator_round_trip(tiny_geometry, tmp_path):
    cfg, geo = tiny_geometry
    ds = synth_gen(cfg, 0, n_per_class=2)
    est = TexturedMeshEstimator(config=cfg, geometry=geo, epochs=1)
    assert clone(est).get_params()["epochs"] == 1
    with pytest.raises(NotFittedError):
        est.transform(ds.images[:1])
    est.fit(ds.images, ds.records)
    assert list(est.classes_) == [g.name for g in geo] and len(est.history_) == 1
    feats = est.transform(ds.images[:2])
    assert feats.shape == (2, cfg.feature_size, cfg.feature_size, cfg.feature_dim)
    pred = est.predict(ds.images[:2])
    assert pred.shape == (2,) and set(pred) <= set(est.classes_)
    assert est.predict_pose(ds.images[:1]).shape == (1, 4)
    assert 0.0 <= est.score(ds.images[:2], ds.records[:2]) <= 1.0
    est.save(tmp_path / "m.npz")
    again = TexturedMeshEstimator.load(tmp_path / "m.npz")
    assert np.array_equal(again.transform(ds.images[:2]), feats)


def test_textured_estimator_input_validation(tiny_geometry):
    cfg, geo = tiny_geometry
    est = TexturedMeshEstimator(config=cfg, geometry=geo, epochs=0)
    ds = synth_gen(cfg, 0, n_per_class=1)
    with pytest.raises(ValueError):
        est.fit(ds.images[:, :30], ds.records)
    with pytest.raises(ValueError):
        est.fit(ds.images, ds.records[:1])
    with pytest.raises(TypeError):
        est.fit(ds.images, [{"class": "ball"}] * len(ds.images))
