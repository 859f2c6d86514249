"""Reverse-mode gradients w.r.t. normalized parameters, and a finite-difference checker.

Tensor algebra, FFTs and reductions are recorded by torch autograd. The
one-pole smoother is a dedicated primitive with a hand-written reverse-time
backward pass so long signals do not produce per-sample graph nodes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.signal
import torch

from .params import ParamVector


class UnregisteredPrimitive(RuntimeError):
    """The loss left the recorded tensor graph (e.g. through numpy)."""


_corruption = {"scale": 1.0}


@contextlib.contextmanager
def corrupt_backward(scale: float = 1.5):
    """Test hook: deliberately scale the smoother's coefficient gradient."""
    old = _corruption["scale"]
    _corruption["scale"] = scale
    try:
        yield
    finally:
        _corruption["scale"] = old


class OnePoleScan(torch.autograd.Function):
    """``s[n] = a*s[n-1] + (1-a)*u[n]`` along the last axis, ``s[-1] = 0``.

    ``u`` is (batch, time) and ``a`` is (batch,).
    """

    @staticmethod
    def forward(ctx, u, a):
        u_np = u.detach().cpu().numpy()
        a_np = a.detach().cpu().numpy()
        s = np.empty_like(u_np)
        for i in range(u_np.shape[0]):
            s[i] = scipy.signal.lfilter([1.0 - a_np[i]], [1.0, -a_np[i]], u_np[i])
        s_t = torch.from_numpy(s).to(u.dtype)
        ctx.save_for_backward(u, a, s_t)
        return s_t

    @staticmethod
    def backward(ctx, grad_s):
        u, a, s = ctx.saved_tensors
        g = grad_s.detach().cpu().numpy()
        a_np = a.detach().cpu().numpy()
        # adjoint: lam[n] = g[n] + a*lam[n+1]
        lam = np.empty_like(g)
        for i in range(g.shape[0]):
            lam[i] = scipy.signal.lfilter([1.0], [1.0, -a_np[i]], g[i, ::-1])[::-1]
        lam_t = torch.from_numpy(lam.copy()).to(u.dtype)
        s_prev = torch.nn.functional.pad(s[:, :-1], (1, 0))
        grad_u = (1.0 - a)[:, None] * lam_t
        grad_a = (lam_t * (s_prev - u)).sum(dim=-1) * _corruption["scale"]
        return grad_u, grad_a


def one_pole(u: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    squeeze = u.dim() == 1
    u2 = u[None] if squeeze else u
    a2 = a.to(u2.dtype).reshape(-1).expand(u2.shape[0]).contiguous()
    out = OnePoleScan.apply(u2, a2)
    return out[0] if squeeze else out


def gradient(loss_value_fn: Callable[[torch.Tensor], torch.Tensor],
             q: ParamVector | np.ndarray) -> np.ndarray:
    """d loss / d q for every coordinate, evaluated in float64."""
    values = q.values if isinstance(q, ParamVector) else np.asarray(q, dtype=np.float64)
    qt = torch.tensor(values, dtype=torch.float64, requires_grad=True)
    try:
        out = loss_value_fn(qt)
    except RuntimeError as err:
        if "numpy" in str(err):
            raise UnregisteredPrimitive(str(err)) from err
        raise
    if not isinstance(out, torch.Tensor):
        # a python number cannot depend on q
        return np.zeros_like(values)
    if out.numel() != 1:
        raise ValueError("loss must be a scalar")
    if not out.requires_grad:
        return np.zeros_like(values)
    (grad,) = torch.autograd.grad(out.reshape(()), qt, allow_unused=True)
    if grad is None:
        return np.zeros_like(values)
    return grad.detach().numpy().copy()


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    excluded: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.excluded is None:
            self.excluded = np.zeros(self.analytic.shape, dtype=bool)

    @property
    def max_error(self) -> float:
        kept = self.rel_error[~self.excluded]
        return float(kept.max()) if kept.size else 0.0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_error < tol


def relative_error(a, d):
    a, d = np.asarray(a), np.asarray(d)
    return np.abs(a - d) / np.maximum(np.maximum(np.abs(a), np.abs(d)), 1e-8)


def grad_check(effect, loss, x, y, q, eps: float = 1e-6) -> GradCheckReport:
    """Compare autograd against central differences of ``loss(effect(x, q), y)``.

    ``effect`` maps (signal tensor, normalized q tensor) to a signal tensor. If
    it has a ``nonsmooth(q, eps)`` method, coordinates it flags are reported
    but excluded from pass/fail.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    values = q.values if isinstance(q, ParamVector) else np.asarray(q, dtype=np.float64)
    xt = torch.tensor(np.array(getattr(x, "samples", x)), dtype=torch.float64)
    yt = torch.tensor(np.array(getattr(y, "samples", y)), dtype=torch.float64)

    def f(qt):
        return loss(effect(xt, qt), yt)

    analytic = gradient(f, values)
    numeric = np.empty_like(values)
    with torch.no_grad():
        for c in range(values.size):
            up, dn = values.copy(), values.copy()
            up[c] += eps
            dn[c] -= eps
            lu = float(f(torch.from_numpy(up)))
            ld = float(f(torch.from_numpy(dn)))
            numeric[c] = (lu - ld) / (2 * eps)
    excluded = np.zeros(values.size, dtype=bool)
    excluded |= (values < eps) | (values > 1 - eps)
    if hasattr(effect, "nonsmooth"):
        excluded |= np.asarray(effect.nonsmooth(values, eps), dtype=bool)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), excluded)
