"""Audio buffers, level normalization, downmixing and test signals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SILENCE = 1e-9
DEFAULT_SR = 44100


class SilentSignal(ValueError):
    pass


class MismatchedLength(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono float64 samples with their sample rate. Full scale is +/-1."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64).reshape(-1)
        if s.size < 1:
            raise ValueError("AudioBuffer needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def peak_normalize(x: AudioBuffer) -> AudioBuffer:
    peak = x.peak
    if peak < SILENCE:
        return x
    return x.with_samples(x.samples / peak)


def rms(x: AudioBuffer) -> float:
    return float(np.sqrt(np.mean(np.square(x.samples))))


def rms_normalize(x: AudioBuffer) -> AudioBuffer:
    r = rms(x)
    if r <= SILENCE:
        raise SilentSignal(f"rms {r:.3g} is below the silence threshold")
    return x.with_samples(x.samples / r)


def mono_downmix(channels: list[AudioBuffer]) -> AudioBuffer:
    if not channels:
        raise ValueError("no channels to downmix")
    first = channels[0]
    for ch in channels[1:]:
        if len(ch) != len(first) or ch.sample_rate != first.sample_rate:
            raise MismatchedLength("channels differ in length or sample rate")
    stacked = np.stack([ch.samples for ch in channels])
    return AudioBuffer(stacked.mean(axis=0), first.sample_rate)


def gen_test_signal(kind: str, duration: float, seed: int = 0,
                    sample_rate: int = DEFAULT_SR) -> AudioBuffer:
    """Deterministic probe signals: ``sine``, ``sweep``, ``white-noise`` or ``impulse``.

    The seed picks the sine frequency and the noise realization; peak is at most 1.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = max(1, int(round(duration * sample_rate)))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    if kind == "sine":
        freq = 1000.0 if seed == 0 else float(rng.uniform(100.0, 5000.0))
        s = np.sin(2 * np.pi * freq * t)
    elif kind == "sweep":
        f0, f1 = 20.0, min(20000.0, 0.45 * sample_rate)
        k = np.log(f1 / f0) / duration
        s = np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1) / k)
    elif kind == "white-noise":
        s = rng.uniform(-1.0, 1.0, n)
    elif kind == "impulse":
        s = np.zeros(n)
        s[0] = 1.0
    else:
        raise ValueError(f"unknown test signal kind {kind!r}")
    return AudioBuffer(s, sample_rate)
