"""Feed-forward compressor: soft-knee gain computer plus one-pole gain smoothing.

The level detector is the instantaneous sample magnitude in dB, floored at
-120 dB. The smoother runs on the dB gain with coefficient
``exp(-1 / (tau_ms * fs / 1000))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import torch

from ..autodiff import one_pole
from ..params import ParamVector, compressor_specs, denormalize, simple_compressor_specs
from ..audio import DEFAULT_SR, AudioBuffer
from .base import Effect

FLOOR_DB = -120.0
FLOOR_LIN = 1e-6


@dataclass(frozen=True)
class CompressorParams:
    threshold: float
    ratio: float
    attack: float
    release: float
    knee: float = 0.0

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.attack <= 0 or self.release <= 0:
            raise ValueError("time constants must be positive")
        if self.knee < 0:
            raise ValueError("knee must be >= 0")


@dataclass(frozen=True)
class SimplifiedCompressorParams:
    threshold: float
    ratio: float
    time: float
    knee: float = 0.0

    def __post_init__(self):
        if self.ratio < 1 or self.time <= 0 or self.knee < 0:
            raise ValueError("invalid compressor parameters")


def smoothing_coeff(time_ms, fs):
    return np.exp(-1.0 / (time_ms * fs / 1000.0))


def static_gain_db(level, threshold, ratio, knee):
    """Gain in dB (<= 0) that the gain computer adds at the given input level."""
    level = np.asarray(level, dtype=np.float64)
    over = level - threshold
    slope = 1.0 / ratio - 1.0
    above = slope * over
    if knee > 0:
        with np.errstate(over="ignore"):  # tiny knees overflow only outside the knee, where unused
            inside = slope * (over + knee / 2) ** 2 / (2 * knee)
        out = np.where(2 * over < -knee, 0.0, np.where(2 * over > knee, above, inside))
    else:
        out = np.where(over > 0, above, 0.0)
    return out if out.ndim else float(out)


def level_db(x):
    return 20.0 * np.log10(np.maximum(np.abs(x), FLOOR_LIN))


@numba.njit(cache=True)
def _smooth_branching(gc, a_att, a_rel):
    out = np.empty_like(gc)
    prev = 0.0
    for n in range(gc.size):
        a = a_att if gc[n] < prev else a_rel
        prev = a * prev + (1.0 - a) * gc[n]
        out[n] = prev
    return out


def gain_envelope_db(x: np.ndarray, p: CompressorParams, fs: float) -> np.ndarray:
    gc = static_gain_db(level_db(x), p.threshold, p.ratio, p.knee)
    return _smooth_branching(np.asarray(gc, dtype=np.float64),
                             smoothing_coeff(p.attack, fs), smoothing_coeff(p.release, fs))


def compress(x: AudioBuffer, p: CompressorParams, fs: float | None = None) -> AudioBuffer:
    fs = fs or x.sample_rate
    g = gain_envelope_db(x.samples, p, fs)
    return x.with_samples(x.samples * 10.0 ** (g / 20.0))


def static_gain_tensor(level, threshold, ratio, knee):
    over = level - threshold
    slope = 1.0 / ratio - 1.0
    safe_knee = torch.clamp(knee, min=1e-12)
    inside = slope * (over + knee / 2) ** 2 / (2 * safe_knee)
    return torch.where(2 * over < -knee, torch.zeros_like(over),
                       torch.where(2 * over > knee, slope * over, inside))


def compress_tensor(x, threshold, ratio, time_ms, knee, fs):
    """Linked-time compressor on (batch, time) signals; parameters are (batch,) tensors."""
    lvl = 20.0 * torch.log10(torch.clamp(x.abs(), min=FLOOR_LIN))
    gc = static_gain_tensor(lvl, threshold[:, None], ratio[:, None], knee[:, None])
    alpha = torch.exp(-1.0 / (time_ms * fs / 1000.0))
    g = one_pole(gc, alpha)
    return x * torch.pow(10.0, g / 20.0)


def compress_simplified(x: AudioBuffer, p: SimplifiedCompressorParams,
                        fs: float | None = None) -> AudioBuffer:
    fs = fs or x.sample_rate
    t = lambda v: torch.tensor([float(v)], dtype=torch.float64)  # noqa: E731
    with torch.no_grad():
        y = compress_tensor(torch.from_numpy(np.array(x.samples))[None], t(p.threshold),
                            t(p.ratio), t(p.time), t(p.knee), fs)
    return x.with_samples(y[0].numpy())


class Compressor(Effect):
    """Reference DSP compressor with separate attack and release (not differentiable)."""

    name = "comp"
    differentiable = False

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None):
        super().__init__(specs or compressor_specs(), sample_rate)

    def params(self, q: ParamVector) -> CompressorParams:
        return CompressorParams(*denormalize(q, self.specs).values)

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        return compress(x, self.params(q), self.sample_rate)

    def process(self, x, p):
        rows = []
        for xi, pi in zip(x.detach().cpu().numpy(), p.detach().cpu().numpy()):
            g = gain_envelope_db(xi, CompressorParams(*pi), self.sample_rate)
            rows.append(xi * 10.0 ** (g / 20.0))
        return torch.from_numpy(np.stack(rows)).to(x.dtype)


class SimplifiedCompressor(Effect):
    name = "comp_simple"

    def __init__(self, sample_rate: int = DEFAULT_SR, specs=None):
        super().__init__(specs or simple_compressor_specs(), sample_rate)

    def process(self, x, p):
        return compress_tensor(x, p[:, 0], p[:, 1], p[:, 2], p[:, 3], self.sample_rate)

    def nonsmooth(self, q, eps):
        # knee = 0 turns the soft knee into a corner
        flags = np.zeros(len(q), dtype=bool)
        flags[3] = q[3] < eps
        return flags
