"""Audio and parameter losses: log-Mel L1, audio MSE and normalized-parameter MSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch

from .params import LengthMismatch, ParamVector
from .audio import DEFAULT_SR, SILENCE, AudioBuffer, SilentSignal


class TooShort(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    fft_size: int = 2048
    hop: int = 512
    mel_bands: int = 128
    sample_rate: int = DEFAULT_SR
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop > self.fft_size:
            raise ValueError("hop must not exceed fft_size")
        if self.mel_bands < 1:
            raise ValueError("need at least one mel band")

    def to_dict(self) -> dict:
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """(mel_bands, fft_size//2 + 1) triangular filters, evaluated at the bin centers."""
    bins = np.fft.rfftfreq(cfg.fft_size, 1.0 / cfg.sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.mel_bands + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bins - lo) / (mid - lo)
    fall = (hi - bins) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    # bands narrower than the bin spacing get the nearest bin
    empty = fb.sum(axis=1) == 0
    fb[empty, np.argmin(np.abs(bins - mid[empty]), axis=1)] = 1.0
    fb.setflags(write=False)
    return fb


def mel_tensor(x: torch.Tensor, cfg: MelConfig) -> torch.Tensor:
    """Magnitude STFT (Hann, no centering) projected on the Mel bank: (..., bands, frames)."""
    if x.shape[-1] < cfg.fft_size:
        raise TooShort(f"need at least {cfg.fft_size} samples, got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    window = torch.hann_window(cfg.fft_size, periodic=True, dtype=x.dtype)
    spec = torch.stft(flat, cfg.fft_size, cfg.hop, window=window, center=False,
                      return_complex=True)
    fb = torch.from_numpy(np.array(mel_filterbank(cfg))).to(x.dtype)
    mel = torch.matmul(fb, spec.abs())
    return mel.reshape(*lead, *mel.shape[-2:])


def mel_spectrogram(x: AudioBuffer, cfg: MelConfig | None = None) -> np.ndarray:
    cfg = cfg or MelConfig(sample_rate=x.sample_rate)
    with torch.no_grad():
        return mel_tensor(torch.from_numpy(np.array(x.samples)), cfg).numpy()


def rms_normalize_tensor(x: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Scale to unit RMS. Non-strict mode floors the RMS instead of raising, for use inside
    optimization loops where an intermediate estimate may render silence."""
    r = torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True))
    if not strict:
        return x / r.clamp(min=SILENCE)
    if torch.any(r <= SILENCE):
        raise SilentSignal("cannot RMS-normalize a silent signal")
    return x / r


def log_mel_l1_from_mel(mel_hat: torch.Tensor, mel: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-item mean |log(M_hat + eps) - log(M + eps)| over bands and frames."""
    d = torch.log(mel_hat + eps) - torch.log(mel + eps)
    return d.abs().mean(dim=(-2, -1))


def mel_l1_tensor(y_hat: torch.Tensor, y: torch.Tensor, cfg: MelConfig,
                  normalize: bool = True) -> torch.Tensor:
    """Batched log-Mel L1 (one value per item); RMS-normalizes both inputs by default."""
    if y_hat.shape[-1] != y.shape[-1]:
        raise LengthMismatch("signals differ in length")
    if normalize:
        y_hat, y = rms_normalize_tensor(y_hat), rms_normalize_tensor(y)
    return log_mel_l1_from_mel(mel_tensor(y_hat, cfg), mel_tensor(y, cfg), cfg.log_floor)


def loss_mel_l1(y_hat: AudioBuffer, y: AudioBuffer, cfg: MelConfig | None = None) -> float:
    """Log-Mel L1 on the buffers as given; callers RMS-normalize first."""
    if len(y_hat) != len(y):
        raise LengthMismatch("signals differ in length")
    cfg = cfg or MelConfig(sample_rate=y.sample_rate)
    with torch.no_grad():
        a = torch.from_numpy(np.array(y_hat.samples))
        b = torch.from_numpy(np.array(y.samples))
        return float(mel_l1_tensor(a, b, cfg, normalize=False))


def mse_audio(y_hat: AudioBuffer, y: AudioBuffer) -> float:
    if len(y_hat) != len(y):
        raise LengthMismatch("signals differ in length")
    return float(np.mean((y_hat.samples - y.samples) ** 2))


def mse_params(q_hat: ParamVector, q: ParamVector) -> float:
    if len(q_hat) != len(q):
        raise LengthMismatch("parameter vectors differ in length")
    return float(np.mean((q_hat.values - q.values) ** 2))
