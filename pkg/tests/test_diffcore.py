import math

import numpy as np
import pytest
import torch

from texmesh.diffcore import (Adam, AdamState, NonFiniteError, adam_step, backward, check_finite, debug_checks,
                              exponential_lr, finite_diff_check, grads_by_name, set_precision, default_dtype)
from texmesh.texture_model import foreground_loglik


def test_backward_sum_gives_ones():
    x = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    g = backward(x.sum(), [x])[0]
    assert torch.equal(g, torch.ones_like(x))


def test_backward_dot_is_two_x():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    g = backward(x @ x, [x])[0]
    assert g.tolist() == [2.0, 4.0]


def test_backward_unreachable_leaf_is_zero():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)
    y = torch.randn(2, dtype=torch.float64, requires_grad=True)
    out = grads_by_name((x**2).sum(), {"x": x, "y": y})
    assert torch.equal(out["y"], torch.zeros(2, dtype=torch.float64))


def test_backward_rejects_non_scalar():
    x = torch.randn(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2, [x])


def test_backward_is_deterministic_and_additive():
    torch.manual_seed(0)
    x = torch.randn(5, dtype=torch.float64, requires_grad=True)
    a = backward((x.sin() * x).sum(), [x])[0]
    b = backward((x.sin() * x).sum(), [x])[0]
    assert torch.equal(a, b)
    ga = backward((x**3).sum(), [x])[0]
    gb = backward(x.exp().sum(), [x])[0]
    gab = backward((x**3).sum() + x.exp().sum(), [x])[0]
    assert torch.allclose(gab, ga + gb, atol=1e-14)


def test_adam_zero_grad_leaves_params():
    state = AdamState(lr=0.1)
    p = [np.array([1.0, -2.0])]
    new, state = adam_step(state, p, [np.zeros(2)])
    assert np.array_equal(new[0], p[0]) and state.t == 1


def test_adam_first_step_hand_value():
    # x = 1, loss x^2: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps)
    state = AdamState(lr=0.05)
    new, _ = adam_step(state, [np.array(1.0)], [np.array(2.0)])
    assert float(new[0]) == pytest.approx(1.0 - 0.05 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert float(new[0]) == pytest.approx(0.95, abs=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), [np.zeros(3)], [np.zeros(2)])


def test_adam_quadratic_bowl_decreases():
    A = np.diag([1.0, 3.0, 10.0])
    x = torch.tensor([1.0, -1.0, 0.5], dtype=torch.float64, requires_grad=True)
    opt = Adam([x], lr=0.01)
    At = torch.as_tensor(A)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        loss = x @ At @ x
        losses.append(float(loss.detach()))
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(1)
    p = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(5)]
    state = AdamState(lr=0.02)
    cur = [p.copy()]
    for g in grads:
        cur, state = adam_step(state, cur, [g])
    m = np.zeros(4)
    v = np.zeros(4)
    x = p.copy()
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.02 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(cur[0], x, atol=1e-15)


def test_exponential_lr():
    assert exponential_lr(1e-4, 0.996, 0) == 1e-4
    assert exponential_lr(1.0, 0.5, 3) == 0.125


def test_finite_diff_constant_and_linear():
    x = torch.randn(6, dtype=torch.float64)
    assert finite_diff_check(lambda t: t.sum() * 0 + 3.0, x) == 0.0
    a = torch.randn(6, dtype=torch.float64)
    assert finite_diff_check(lambda t: (a * t).sum(), x) <= 1e-10


def test_finite_diff_detects_wrong_gradient():
    x = torch.randn(4, dtype=torch.float64)
    assert finite_diff_check(lambda t: (t**2).sum(), x, grad=np.zeros(4)) > 0.1


def test_finite_diff_foreground_likelihood():
    rng = np.random.default_rng(3)
    theta = torch.as_tensor(rng.standard_normal(8))
    f = rng.standard_normal(8)
    f /= np.linalg.norm(f)
    assert finite_diff_check(lambda t: foreground_loglik(t, theta), f, h=1e-4) <= 1e-4


def test_finite_diff_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda t: torch.log(t).sum(), torch.tensor([-1.0], dtype=torch.float64))


def test_check_finite_modes():
    bad = np.array([1.0, np.nan])
    old = debug_checks()
    try:
        debug_checks(False)
        assert check_finite(bad) is bad
        with pytest.raises(NonFiniteError):
            check_finite(bad, always=True)
        debug_checks(True)
        with pytest.raises(NonFiniteError):
            check_finite(torch.tensor([math.inf]))
    finally:
        debug_checks(old)


def test_precision_switch():
    try:
        set_precision("float32")
        assert default_dtype() == torch.float32
    finally:
        set_precision("float64")
    assert default_dtype() == torch.float64
    with pytest.raises(ValueError):
        set_precision("float16")
