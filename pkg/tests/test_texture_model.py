import math

import numpy as np
import pytest
import torch

from oracles import gaussian_logpdf_iso, mixture_loglik, softmax
from texmesh.camera import Intrinsics, pose_to_extrinsics
from texmesh.geometry import build_template
from texmesh.rasterizer import render_surface, sample_texture
from texmesh.texture_model import (BackgroundBank, NeuralTextureBank, ViewingBinSet, background_loglik,
                             foreground_loglik, momentum_update, normalize, object_loglik, push_background,
                             viewing_coefficients)

LOGC = -math.log(math.sqrt(2 * math.pi))


def _unit(rng, *shape):
    return normalize(rng.standard_normal(shape))


def test_bins_structure():
    bins = ViewingBinSet.build()
    M = bins.matrices()
    assert bins.n_bins == 7 and np.array_equal(M[0], np.eye(3))
    z = np.array([0.0, 0.0, 1.0])
    tilts = [math.degrees(math.acos(np.clip((Mb @ z) @ z, -1, 1))) for Mb in M[1:]]
    assert np.allclose(tilts, 60.0, atol=1e-12)
    with pytest.raises(ValueError):
        ViewingBinSet.build(0)


def test_single_bin_alpha_is_one(rng):
    a = viewing_coefficients(_unit(rng, 5, 3), _unit(rng, 5, 3), ViewingBinSet.build(1))
    assert torch.equal(a, torch.ones(5, 1, dtype=torch.float64))


def test_alpha_hand_softmax_seven_bins():
    z = np.array([0.0, 0.0, 1.0])
    a = viewing_coefficients(z, z, ViewingBinSet.build(7, 60.0), T=5.0).numpy()
    ref = softmax([5.0] + [5.0 * math.cos(math.radians(60))] * 6)
    assert np.max(np.abs(a - ref)) < 1e-12
    assert np.allclose(a[1:], a[1], atol=1e-15)


def test_alpha_simplex_and_shift_invariance(rng):
    n, d = _unit(rng, 50, 3), _unit(rng, 50, 3)
    a = viewing_coefficients(n, d, ViewingBinSet.build()).numpy()
    assert np.all(a > 0) and np.allclose(a.sum(1), 1, atol=1e-12)
    # scaling T by zero flattens; adding a constant to logits is a no-op of softmax
    flat = viewing_coefficients(n, d, ViewingBinSet.build(), T=0.0).numpy()
    assert np.allclose(flat, 1 / 7, atol=1e-15)


def test_alpha_rejects_zero_vectors():
    with pytest.raises(ValueError):
        viewing_coefficients(np.zeros(3), np.array([0, 0, 1.0]), ViewingBinSet.build())


def test_foreground_loglik_cases(rng):
    th = _unit(rng, 8)
    assert float(foreground_loglik(th, th)) == pytest.approx(LOGC, abs=1e-15)
    e1, e2 = np.eye(8)[0], np.eye(8)[1]
    assert float(foreground_loglik(e1, e2)) == pytest.approx(LOGC - 1.0, abs=1e-15)
    assert float(foreground_loglik(e1, e2, sigma=0.5)) == pytest.approx(-math.log(0.5 * math.sqrt(2 * math.pi)) - 4.0)
    with pytest.raises(ValueError):
        foreground_loglik(e1, e2, sigma=0.0)


def test_foreground_mixture_matches_summation_oracle(rng):
    for _ in range(20):
        f = _unit(rng, 16)
        thetas = _unit(rng, 7, 16)
        alpha = rng.dirichlet(np.ones(7))
        sigma = rng.uniform(0.5, 2.0)
        got = float(foreground_loglik(f, thetas, sigma, alpha))
        assert abs(got - mixture_loglik(f, thetas, alpha, sigma)) < 1e-12


def test_foreground_increasing_in_dot(rng):
    th = _unit(rng, 8)
    fs = _unit(rng, 200, 8)
    ll = foreground_loglik(fs, th).numpy()
    dots = fs @ th
    order = np.argsort(dots)
    assert np.all(np.diff(ll[order]) > 0)


def test_background_loglik_cases(rng):
    B = _unit(rng, 64, 8)
    assert float(background_loglik(B[5], B)) == pytest.approx(LOGC, abs=1e-15)
    f = _unit(rng, 8)
    assert float(background_loglik(f, B[:1])) == pytest.approx(gaussian_logpdf_iso(f, B[0], 1.0), abs=1e-14)
    ref = max(gaussian_logpdf_iso(f, b, 1.0) for b in B)
    assert float(background_loglik(f, B)) == pytest.approx(ref, abs=1e-14)
    with pytest.raises(ValueError):
        background_loglik(f, np.zeros((0, 8)))


def _scene(rng, H=6, W=7, b=3, d=5):
    F = torch.as_tensor(_unit(rng, H, W, d))
    bins = torch.as_tensor(_unit(rng, H, W, b, d))
    alpha = torch.as_tensor(rng.dirichlet(np.ones(b), (H, W)))
    fg = rng.random((H, W)) < 0.5
    bank = _unit(rng, 10, d)
    return F, bins, alpha, fg, bank


def test_object_loglik_all_background(rng):
    F, bins, alpha, fg, bank = _scene(rng)
    allbg = np.ones(fg.shape, bool)
    got = object_loglik(F, bins, alpha, np.zeros_like(allbg), allbg, bank)
    assert float(got) == pytest.approx(float(background_loglik(F.reshape(-1, 5), bank).sum()), abs=1e-12)


def test_object_loglik_additive_over_halves(rng):
    F, bins, alpha, fg, bank = _scene(rng)
    bg = ~fg
    whole = object_loglik(F, bins, alpha, fg, bg, bank)
    left = np.zeros(fg.shape, bool)
    left[:, :3] = True
    a = object_loglik(F, bins, alpha, fg & left, bg & left, bank)
    b = object_loglik(F, bins, alpha, fg & ~left, bg & ~left, bank)
    assert float(whole) == pytest.approx(float(a + b), abs=1e-12)


def test_object_loglik_rejects_overlap(rng):
    F, bins, alpha, fg, bank = _scene(rng)
    with pytest.raises(ValueError):
        object_loglik(F, bins, alpha, fg, fg | True, bank)


def test_self_rendered_scene_is_maximal(rng):
    t = build_template(3)
    K = Intrinsics(40.0, 24, 24)
    tex = torch.as_tensor(_unit(rng, 1, 16, 16, 6))
    bank = _unit(rng, 4, 6)

    def render(pose):
        R, tt = pose_to_extrinsics(*pose)
        s = render_surface(torch.as_tensor(t.vertices), t.faces, t.vertices, torch.as_tensor(R),
                           torch.as_tensor(tt), K)
        per_bin = torch.zeros(24 * 24, 1, 6, dtype=torch.float64)
        per_bin[s.pixels] = sample_texture(tex, s.uv)
        return per_bin.reshape(24, 24, 1, 6), s.mask

    true_pose = np.array([0.3, 0.2, 0.1, 3.0])
    bins, mask = render(true_pose)
    F = torch.as_tensor(np.broadcast_to(bank[0], (24, 24, 6)).copy())
    F[torch.as_tensor(mask)] = bins[torch.as_tensor(mask)][:, 0]
    alpha = torch.ones(24, 24, 1, dtype=torch.float64)

    def score(pose):
        b, m = render(pose)
        return float(object_loglik(F, b, alpha, m, ~m, bank))

    best = score(true_pose)
    for _ in range(50):
        pert = true_pose + np.concatenate([rng.normal(0, 0.3, 3), [rng.normal(0, 0.2)]])
        assert score(pert) <= best + 1e-9


def test_momentum_unity_and_replacement(rng):
    tex = _unit(rng, 1, 4, 4, 3)
    surf = rng.standard_normal((4, 4, 3))
    vis = rng.random((4, 4)) < 0.5
    alpha = np.ones((4, 4, 1))
    assert np.array_equal(momentum_update(tex, surf, vis, alpha, 1.0), tex)
    out = momentum_update(tex, surf, vis, alpha, 0.0)
    assert np.allclose(out[0][vis], normalize(surf[vis]), atol=1e-15)
    assert np.array_equal(out[0][~vis], tex[0][~vis])
    with pytest.raises(ValueError):
        momentum_update(tex, surf, vis, alpha, 1.5)


def test_momentum_converges_monotonically(rng):
    tex = _unit(rng, 3, 4, 4, 5)
    surf = _unit(rng, 4, 4, 5)
    vis = np.ones((4, 4), bool)
    vis[0, 0] = False
    alpha = rng.dirichlet(np.ones(3), (4, 4))
    cur = tex
    prev = None
    for _ in range(20):
        cur = momentum_update(cur, surf, vis, alpha, 0.9)
        cos = np.einsum("bnd,nd->bn", cur[:, vis], surf[vis])
        if prev is not None:
            assert np.all(cos >= prev - 1e-12)
        prev = cos
    assert np.array_equal(cur[:, 0, 0], tex[:, 0, 0])
    assert np.allclose(np.linalg.norm(cur, axis=-1), 1.0, atol=1e-12)


def test_background_bank_fifo():
    bank = BackgroundBank(4, 2)
    feats = normalize(np.array([[1.0, 0], [0, 1], [1, 1], [1, -1]]))
    push_background(bank, feats[:3])
    assert len(bank) == 3 and np.allclose(bank.features, feats[:3])
    bank.push(feats[3:])
    bank.push(np.array([[-1.0, 0]]))
    assert len(bank) == 4
    assert np.allclose(bank.features, np.concatenate([feats[1:], [[-1.0, 0]]]))
    with pytest.raises(ValueError):
        BackgroundBank(0, 2)


def test_background_bank_unit_norm_after_many_pushes(rng):
    bank = BackgroundBank(64, 8)
    for _ in range(1000):
        bank.push(rng.standard_normal((int(rng.integers(1, 4)), 8)) * rng.uniform(0.1, 10))
    assert len(bank) == 64
    assert np.allclose(np.linalg.norm(bank.features, axis=1), 1.0, atol=1e-12)


def test_bank_state_round_trip(rng):
    bank = BackgroundBank(5, 3).push(rng.standard_normal((7, 3)))
    st = bank.state()
    again = BackgroundBank.from_state(st["data"], st["size"], st["cursor"])
    assert np.array_equal(again.features, bank.features)


def test_texture_bank_is_unit_norm():
    tb = NeuralTextureBank(2, 7, 8, 4, np.random.default_rng(0))
    assert tb.shape == (7, 8, 8, 4) and tb.n_classes == 2
    assert np.allclose(np.linalg.norm(tb.textures, axis=-1), 1.0)
