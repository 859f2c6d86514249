"""Parametric and graphic equalizers built from RBJ cookbook biquads.

The analysis path multiplies the FFT of the zero-padded input by the sampled
cascade response; the synthesis path runs the same biquads in the time domain
(transposed direct form II).
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.signal
import torch

from ..params import ParamSpec, ParamVector, denormalize, geq_specs, peq_specs
from ..audio import DEFAULT_SR, AudioBuffer
from .base import Effect

GRAPHIC_CENTERS = tuple(31.25 * 2 ** k for k in range(10))
GRAPHIC_BANDWIDTH_OCT = 2.0


class FrequencyOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    @property
    def sos(self) -> list[float]:
        return [self.b0, self.b1, self.b2, 1.0, self.a1, self.a2]


def bandwidth_to_q(octaves: float) -> float:
    return 1.0 / (2.0 * math.sinh(math.log(2.0) / 2.0 * octaves))


GRAPHIC_Q = bandwidth_to_q(GRAPHIC_BANDWIDTH_OCT)


def _cookbook(kind: str, fc, gain, q, fs):
    """Cookbook coefficients (b0, b1, b2, a1, a2) normalized by a0. Works on tensors."""
    A = torch.pow(10.0, gain / 40.0)
    w0 = 2.0 * math.pi * fc / fs
    cw, sw = torch.cos(w0), torch.sin(w0)
    alpha = sw / (2.0 * q)
    if kind in ("peak", "graphic"):
        b = (1 + alpha * A, -2 * cw, 1 - alpha * A)
        a = (1 + alpha / A, -2 * cw, 1 - alpha / A)
    elif kind == "low-shelf":
        k = 2 * torch.sqrt(A) * alpha
        b = (A * ((A + 1) - (A - 1) * cw + k), 2 * A * ((A - 1) - (A + 1) * cw),
             A * ((A + 1) - (A - 1) * cw - k))
        a = ((A + 1) + (A - 1) * cw + k, -2 * ((A - 1) + (A + 1) * cw),
             (A + 1) + (A - 1) * cw - k)
    elif kind == "high-shelf":
        k = 2 * torch.sqrt(A) * alpha
        b = (A * ((A + 1) + (A - 1) * cw + k), -2 * A * ((A - 1) + (A + 1) * cw),
             A * ((A + 1) + (A - 1) * cw - k))
        a = ((A + 1) - (A - 1) * cw + k, 2 * ((A - 1) - (A + 1) * cw),
             (A + 1) - (A - 1) * cw - k)
    else:
        raise ValueError(f"unknown band kind {kind!r}")
    return (b[0] / a[0], b[1] / a[0], b[2] / a[0], a[1] / a[0], a[2] / a[0])


def design_band(kind: str, fc: float, gain: float, q: float, fs: float) -> BiquadCoeffs:
    if not 0 < fc < fs / 2:
        raise FrequencyOutOfRange(f"center {fc} Hz outside (0, {fs / 2}) Hz")
    if q <= 0:
        raise ValueError("Q must be positive")
    t = lambda v: torch.tensor(float(v), dtype=torch.float64)  # noqa: E731
    return BiquadCoeffs(*(float(c) for c in _cookbook(kind, t(fc), t(gain), t(q), fs)))


def _response(b0, b1, b2, a1, a2, z1, z2):
    return (b0 + b1 * z1 + b2 * z2) / (1 + a1 * z1 + a2 * z2)


def freq_response(coeffs: Sequence[BiquadCoeffs], n_bins: int) -> np.ndarray:
    """Cascade response at w_k = pi*k/(n_bins-1), k = 0..n_bins-1."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    w = np.pi * np.arange(n_bins) / (n_bins - 1)
    z1, z2 = np.exp(-1j * w), np.exp(-2j * w)
    h = np.ones(n_bins, dtype=complex)
    for c in coeffs:
        h *= _response(c.b0, c.b1, c.b2, c.a1, c.a2, z1, z2)
    return h


def fft_size_for(n: int) -> int:
    """Next power of two at least twice the signal length."""
    return 1 << int(math.ceil(math.log2(max(2 * n, 2))))


@dataclass(frozen=True)
class EqDefinition:
    """Band layout: (kind, fixed center or None) per band, plus parameter specs."""

    bands: tuple
    specs: tuple

    @classmethod
    def parametric(cls, specs: Sequence[ParamSpec] | None = None) -> "EqDefinition":
        kinds = ("low-shelf", "peak", "peak", "peak", "high-shelf")
        specs = tuple(specs or peq_specs())
        if len(specs) != 15:
            raise ValueError("parametric EQ takes 15 parameters")
        return cls(tuple((k, None) for k in kinds), specs)

    @classmethod
    def graphic(cls, specs: Sequence[ParamSpec] | None = None) -> "EqDefinition":
        specs = tuple(specs or geq_specs(len(GRAPHIC_CENTERS)))
        if len(specs) != len(GRAPHIC_CENTERS):
            raise ValueError("graphic EQ takes one gain per band")
        return cls(tuple(("graphic", fc) for fc in GRAPHIC_CENTERS), specs)

    @property
    def is_graphic(self) -> bool:
        return self.bands[0][0] == "graphic"

    def band_params(self, p):
        """Yield (kind, fc, gain, Q) per band from a denormalized vector (tensor columns ok)."""
        if self.is_graphic:
            for i, (kind, fc) in enumerate(self.bands):
                yield kind, fc, p[..., i], GRAPHIC_Q
        else:
            for i, (kind, _) in enumerate(self.bands):
                yield kind, p[..., 3 * i], p[..., 3 * i + 1], p[..., 3 * i + 2]

    def coeffs(self, p: ParamVector, fs: float) -> list[BiquadCoeffs]:
        vals = p.values
        return [design_band(kind, float(fc), float(g), float(q), fs)
                for kind, fc, g, q in self.band_params(vals)]


def apply_time_domain(x: AudioBuffer, eq: EqDefinition, p: ParamVector) -> AudioBuffer:
    coeffs = eq.coeffs(p, x.sample_rate)
    sos = np.array([c.sos for c in coeffs])
    return x.with_samples(scipy.signal.sosfilt(sos, x.samples))


def apply_frequency_sampled(x: AudioBuffer, eq: EqDefinition, p: ParamVector) -> AudioBuffer:
    n = len(x)
    n_fft = fft_size_for(n)
    h = freq_response(eq.coeffs(p, x.sample_rate), n_fft // 2 + 1)
    y = np.fft.irfft(np.fft.rfft(x.samples, n_fft) * h, n_fft)[:n]
    return x.with_samples(y)


def _band_tensor_coeffs(eq: EqDefinition, p: torch.Tensor, fs: float) -> torch.Tensor:
    """(batch, bands, 5) coefficient tensor from denormalized (batch, C) parameters."""
    rows = []
    for kind, fc, gain, q in eq.band_params(p):
        fc = fc if torch.is_tensor(fc) else torch.full_like(gain, fc)
        q = q if torch.is_tensor(q) else torch.full_like(gain, q)
        rows.append(torch.stack(_cookbook(kind, fc, gain, q, fs), dim=-1))
    return torch.stack(rows, dim=-2)


@functools.lru_cache(maxsize=8)
def _trig_table(n_bins: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Real and imaginary parts of [1, z^-1, z^-2] on the bin grid, shape (3, n_bins)."""
    w = torch.pi * torch.arange(n_bins, dtype=torch.float64) / (n_bins - 1)
    k = torch.arange(3, dtype=torch.float64)[:, None]
    return torch.cos(k * w), -torch.sin(k * w)


def tensor_response(coeffs: torch.Tensor, n_bins: int) -> torch.Tensor:
    """Cascade response from (..., bands, 5) coefficients; one complex division for all bands."""
    re, im = (t.to(coeffs.dtype) for t in _trig_table(n_bins))
    b = coeffs[..., :3]
    a = torch.cat([torch.ones_like(coeffs[..., :1]), coeffs[..., 3:]], dim=-1)
    num = torch.complex(b @ re, b @ im)
    den = torch.complex(a @ re, a @ im)
    return num.prod(dim=-2) / den.prod(dim=-2)


def frequency_sampled_filter(x: torch.Tensor, coeffs: torch.Tensor) -> torch.Tensor:
    n = x.shape[-1]
    n_fft = fft_size_for(n)
    h = tensor_response(coeffs, n_fft // 2 + 1)
    return torch.fft.irfft(torch.fft.rfft(x, n_fft) * h, n_fft)[..., :n]


class _Equalizer(Effect):
    def __init__(self, eq: EqDefinition, sample_rate: int = DEFAULT_SR):
        super().__init__(eq.specs, sample_rate)
        self.eq = eq

    def process(self, x, p):
        return frequency_sampled_filter(x, _band_tensor_coeffs(self.eq, p, self.sample_rate))

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        return apply_time_domain(x, self.eq, denormalize(q, self.specs))


class ParametricEQ(_Equalizer):
    name = "peq"

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None):
        super().__init__(EqDefinition.parametric(specs), sample_rate)

    def initial_q(self) -> np.ndarray:
        # identical peaking bands get identical gradients and never separate,
        # so start their centre frequencies spread over the range
        q = np.full(self.n_params, 0.5)
        peaks = [i for i, s in enumerate(self.specs) if s.name.startswith("peak") and s.name.endswith("freq")]
        for k, i in enumerate(peaks):
            q[i] = (k + 1) / (len(peaks) + 1)
        return q


class GraphicEQ(_Equalizer):
    name = "geq"

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None):
        super().__init__(EqDefinition.graphic(specs), sample_rate)
