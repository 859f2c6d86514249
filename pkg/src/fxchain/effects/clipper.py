"""Memoryless clippers: parametric tanh/cubic/hard blend, Taylor and Chebyshev polynomials.

All functions accept numpy arrays, python floats or torch tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..params import ParamVector, clipper_specs, denormalize, polynomial_specs
from ..audio import DEFAULT_SR, AudioBuffer
from .base import Effect

N_TERMS = 24
CUBIC_KNEE = 1.5


class HardnessOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ParametricClipperParams:
    gain: float  # dB
    offset: float
    hardness: float

    def __post_init__(self):
        if not 0.0 <= self.hardness <= 2.0:
            raise HardnessOutOfRange(f"hardness {self.hardness} outside [0, 2]")


@dataclass(frozen=True)
class PolynomialClipperParams:
    coefficients: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.coefficients)
        if any(abs(v) > 1 for v in c):
            raise ValueError("polynomial coefficients must lie in [-1, 1]")
        object.__setattr__(self, "coefficients", c)


def _ops(x):
    return torch if torch.is_tensor(x) else np


def f_hard(x):
    xp = _ops(x)
    return xp.clip(x, -1.0, 1.0) if xp is np else torch.clamp(x, -1.0, 1.0)


def f_cubic(x):
    """x - 4x^3/27 on [-3/2, 3/2], sign(x) outside. Odd, C1, saturates at +/-1."""
    xc = f_hard(x / CUBIC_KNEE) * CUBIC_KNEE
    return xc - 4.0 * xc ** 3 / 27.0


def blend(x, h):
    """tanh -> cubic -> hard as hardness goes 0 -> 1 -> 2."""
    xp = _ops(x) if not torch.is_tensor(h) else torch
    if not torch.is_tensor(h):
        h_arr = np.asarray(h)
        if np.any((h_arr < 0) | (h_arr > 2)):
            raise HardnessOutOfRange(f"hardness {h} outside [0, 2]")
    soft = (1 - h) * xp.tanh(x) + h * f_cubic(x)
    hard = (2 - h) * f_cubic(x) + (h - 1) * f_hard(x)
    out = xp.where(h <= 1, soft, hard)
    return float(out) if np.ndim(out) == 0 and not torch.is_tensor(out) else out


def clip_parametric_tensor(x, gain_db, offset, hardness):
    g = torch.pow(10.0, gain_db / 20.0)
    return (blend(g * x + offset, hardness) - blend(offset, hardness)) / g


def clip_parametric(x: AudioBuffer, p: ParametricClipperParams) -> AudioBuffer:
    g = 10.0 ** (p.gain / 20.0)
    y = (blend(g * x.samples + p.offset, p.hardness) - blend(p.offset, p.hardness)) / g
    return x.with_samples(y)


def horner(x, coeffs: Sequence):
    """sum_h coeffs[h] * x**h."""
    out = coeffs[-1] * (x * 0 + 1)
    for c in reversed(coeffs[:-1]):
        out = out * x + c
    return out


def clenshaw(x, coeffs: Sequence):
    """sum_h coeffs[h] * T_h(x) via the Clenshaw recurrence."""
    b1 = b2 = x * 0
    for c in reversed(coeffs[1:]):
        b1, b2 = 2 * x * b1 - b2 + c, b1
    return x * b1 - b2 + coeffs[0]


def chebyshev_t(n: int, x):
    """T_n by the three-term recurrence."""
    t0, t1 = x * 0 + 1, x
    if n == 0:
        return t0
    for _ in range(n - 1):
        t0, t1 = t1, 2 * x * t1 - t0
    return t1


def clip_taylor(x: AudioBuffer, p: PolynomialClipperParams) -> AudioBuffer:
    return x.with_samples(horner(x.samples, p.coefficients))


def clip_chebyshev(x: AudioBuffer, p: PolynomialClipperParams) -> AudioBuffer:
    return x.with_samples(clenshaw(x.samples, p.coefficients))


class ParametricClipper(Effect):
    name = "clip"

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None):
        super().__init__(specs or clipper_specs(), sample_rate)

    def process(self, x, p):
        return clip_parametric_tensor(x, p[:, :1], p[:, 1:2], p[:, 2:3])

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        return clip_parametric(x, ParametricClipperParams(*denormalize(q, self.specs).values))

    def reflections(self, q):
        # offset -o renders -clip(-x; o)
        return [self._negated(q, [1])]

    def nonsmooth(self, q, eps):
        # hardness = 1 is the branch point between the two blends
        flags = np.zeros(len(q), dtype=bool)
        h = denormalize(ParamVector(q), self.specs).values[2]
        span = self.specs[2].max - self.specs[2].min
        flags[2] = abs(h - 1.0) <= eps * span
        return flags


class _Polynomial(Effect):
    evaluate = staticmethod(horner)

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None, n_terms: int = N_TERMS):
        super().__init__(specs or polynomial_specs(n_terms), sample_rate)

    def process(self, x, p):
        return type(self).evaluate(x, [p[:, h:h + 1] for h in range(self.n_params)])

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        coeffs = denormalize(q, self.specs).values
        return x.with_samples(type(self).evaluate(x.samples, list(coeffs)))

    def reflections(self, q):
        # negating odd-order terms renders f(-x); T_h(-x) = (-1)^h T_h(x) gives the same for Chebyshev
        return [self._negated(q, range(1, self.n_params, 2))]

    def initial_q(self) -> np.ndarray:
        # all-zero coefficients render silence; start from a scaled identity instead
        q = np.full(self.n_params, 0.5)
        if self.n_params > 1:
            spec = self.specs[1]
            q[1] = (0.5 - spec.min) / (spec.max - spec.min)
        return q


class TaylorClipper(_Polynomial):
    name = "taylor"
    evaluate = staticmethod(horner)


class ChebyshevClipper(_Polynomial):
    name = "chebyshev"
    evaluate = staticmethod(clenshaw)
