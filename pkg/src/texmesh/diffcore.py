"""Reverse-mode differentiation helpers, Adam, and a finite-difference checker.

The tape itself is torch's autograd graph; this module wraps it behind a small
surface (``backward``, ``adam_step``, ``finite_diff_check``) that the rest of
the package and the test-suite use.  Every numerical path defaults to float64.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

__all__ = [
    "NonFiniteError",
    "default_dtype",
    "set_precision",
    "dtype_of",
    "debug_checks",
    "check_finite",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "exponential_lr",
    "finite_diff_check",
]

_DTYPES = {"float64": torch.float64, "float32": torch.float32}
_state = {"dtype": torch.float64, "debug": os.environ.get("TEXMESH_DEBUG", "0") == "1"}


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a checked value."""


def default_dtype() -> torch.dtype:
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Switch between ``"float64"`` (default, oracle fidelity) and ``"float32"``."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def dtype_of(name: str) -> torch.dtype:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    return _DTYPES[name]


def debug_checks(enabled: bool | None = None) -> bool:
    """Query or toggle per-op finiteness assertions."""
    if enabled is not None:
        _state["debug"] = bool(enabled)
    return _state["debug"]


def check_finite(value, what: str = "value", always: bool = False):
    """Raise :class:`NonFiniteError` if ``value`` holds NaN/Inf.

    Only active in debug mode unless ``always`` is set (loss values are always
    checked by callers).
    """
    if not (always or _state["debug"]):
        return value
    if isinstance(value, torch.Tensor):
        ok = bool(torch.isfinite(value).all())
    else:
        ok = bool(np.all(np.isfinite(value)))
    if not ok:
        raise NonFiniteError(f"non-finite {what}")
    return value


def backward(root: torch.Tensor, leaves: Sequence[torch.Tensor]) -> dict[int, torch.Tensor]:
    """Adjoints of a scalar ``root`` with respect to each tensor in ``leaves``.

    Returns a mapping ``index -> adjoint``; leaves the root does not depend on
    receive zeros of their own shape.  The graph is freed afterwards.
    """
    if root.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    leaves = list(leaves)
    grads = torch.autograd.grad(root.reshape(()), leaves, allow_unused=True)
    out = {}
    for i, (leaf, g) in enumerate(zip(leaves, grads)):
        out[i] = torch.zeros_like(leaf) if g is None else g
    return out


@dataclass
class AdamState:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update on plain arrays; returns ``(params, state)``.

    Works for numpy arrays and torch tensors alike (no in-place mutation).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [p * 0 for p in params]
        state.v = [p * 0 for p in params]
    for p, g, m in zip(params, grads, state.m):
        if tuple(p.shape) != tuple(g.shape) or tuple(m.shape) != tuple(p.shape):
            raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new_params.append(p - state.lr * m_hat / ((v_hat**0.5) + state.eps))
    return new_params, state


class Adam:
    """In-place Adam over a list of torch leaf tensors.

    Thin stateful wrapper around :func:`adam_step` so the optimizer used in
    fitting, training and inference is the same audited recurrence.
    """

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor] | None = None) -> None:
        if grads is None:
            grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        values = [p.detach() for p in self.params]
        new, self.state = adam_step(self.state, values, list(grads))
        for p, n in zip(self.params, new):
            p.copy_(n)

    def state_dict(self) -> dict:
        s = self.state
        return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t,
                "m": [x.clone() for x in s.m], "v": [x.clone() for x in s.v]}


def exponential_lr(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay**epoch


def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x, h: float = 1e-4,
                      coords: Iterable[int] | None = None,
                      grad: np.ndarray | torch.Tensor | None = None) -> float:
    """Max relative error between the autograd gradient of ``f`` and central differences.

    ``f`` maps a float64 tensor shaped like ``x`` to a scalar tensor.  The error
    per coordinate is ``|g_analytic - g_fd| / max(1, |g_fd|)``.  ``coords``
    restricts the check to a subset of flat indices; ``grad`` supplies an
    analytic gradient computed elsewhere (e.g. a hand-written backward).
    """
    x0 = torch.as_tensor(x, dtype=torch.float64).detach().clone()
    if grad is None:
        xg = x0.clone().requires_grad_(True)
        y = f(xg)
        _assert_finite_scalar(y)
        (g,) = torch.autograd.grad(y.reshape(()), [xg], allow_unused=True)
        g = torch.zeros_like(x0) if g is None else g
    else:
        g = torch.as_tensor(grad, dtype=torch.float64)
    g = g.reshape(-1)
    flat = x0.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            _assert_finite_scalar(fp)
            _assert_finite_scalar(fm)
            fd = (float(fp) - float(fm)) / (2.0 * h)
            err = abs(float(g[i]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def _assert_finite_scalar(y) -> None:
    v = float(y.detach()) if isinstance(y, torch.Tensor) else float(y)
    if not np.isfinite(v):
        raise NonFiniteError("function value is not finite")


def as_tensor(x, requires_grad: bool = False, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x,
                        dtype=dtype or default_dtype())
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def grads_by_name(root: torch.Tensor, named: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    names = list(named)
    out = backward(root, [named[n] for n in names])
    return {n: out[i] for i, n in enumerate(names)}
