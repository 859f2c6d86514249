from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..params import ParamSpec, ParamVector, denormalize_tensor
from ..audio import DEFAULT_SR, AudioBuffer

SILENCE = 1e-9


def peak_normalize_tensor(x: torch.Tensor) -> torch.Tensor:
    peak = x.abs().amax(dim=-1, keepdim=True)
    return x / torch.where(peak < SILENCE, torch.ones_like(peak), peak)


class Effect:
    """An audio effect over normalized parameters.

    ``__call__`` is the tensor path used for gradients and batches: ``x`` is
    (batch, time) or (time,), ``q`` is (batch, C) or (C,). ``render`` is the
    reference path on an :class:`AudioBuffer`.
    """

    name = "effect"
    differentiable = True

    def __init__(self, specs: Sequence[ParamSpec], sample_rate: int = DEFAULT_SR):
        self.specs = list(specs)
        self.sample_rate = sample_rate

    @property
    def n_params(self) -> int:
        return len(self.specs)

    def process(self, x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 1
        x2 = x[None] if squeeze else x
        q2 = q.reshape(-1, self.n_params).expand(x2.shape[0], -1)
        out = self.process(x2, denormalize_tensor(q2, self.specs))
        return out[0] if squeeze else out

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        with torch.no_grad():
            out = self(torch.from_numpy(np.array(x.samples)), torch.from_numpy(np.array(q.values)))
        return x.with_samples(out.numpy())

    def nonsmooth(self, q: np.ndarray, eps: float) -> np.ndarray:
        return np.zeros(len(q), dtype=bool)

    def reflections(self, q: np.ndarray) -> list[np.ndarray]:
        """Parameter points whose output is (close to) a sign/time-reversal image of the output at q.

        Magnitude-spectrum losses barely separate such points, so a fit can settle in the
        wrong one; restarting from the reflection lets it cross over.
        """
        return []

    def _negated(self, q: np.ndarray, idx) -> np.ndarray:
        """q with the denormalized values at ``idx`` negated (linear specs), clipped to range."""
        out = np.array(q, dtype=np.float64)
        for i in idx:
            s = self.specs[i]
            p = s.min + out[i] * (s.max - s.min)
            out[i] = np.clip((-p - s.min) / (s.max - s.min), 0.0, 1.0)
        return out

    def initial_q(self) -> np.ndarray:
        """Starting point for paired fitting; mid-range unless an effect needs symmetry broken."""
        return np.full(self.n_params, 0.5)

    def __repr__(self):
        return f"{type(self).__name__}(sample_rate={self.sample_rate})"
