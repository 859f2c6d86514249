"""Ordered effect chains with 0 dBFS peak normalization before each effect."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .effects import (ChebyshevClipper, Compressor, Effect, GraphicEQ, ParametricClipper,
                      ParametricEQ, SimplifiedCompressor, TaylorClipper,
                      peak_normalize_tensor)
from .params import ParamSpec, ParamVector, apply_overrides, range_table_hash
from .audio import DEFAULT_SR, AudioBuffer, peak_normalize

EFFECTS = {
    cls.name: cls
    for cls in (ParametricEQ, GraphicEQ, Compressor, SimplifiedCompressor,
                ParametricClipper, TaylorClipper, ChebyshevClipper)
}


def make_effect(name: str, sample_rate: int = DEFAULT_SR, overrides: dict | None = None,
                **kwargs) -> Effect:
    if name in ("comp_proxy", "comp_hybrid"):
        from .proxy import ProxyCompressor
        return ProxyCompressor(sample_rate, hybrid=name == "comp_hybrid", **kwargs)
    try:
        cls = EFFECTS[name]
    except KeyError:
        raise ValueError(f"unknown effect {name!r}; choose from {sorted(EFFECTS)}") from None
    effect = cls(sample_rate=sample_rate)
    if overrides:
        effect.specs = apply_overrides(effect.specs, overrides)
    return effect


class EffectChain:
    def __init__(self, effects: Sequence[Effect]):
        if not effects:
            raise ValueError("a chain needs at least one effect")
        self.effects = list(effects)

    @classmethod
    def from_id(cls, chain_id: str, sample_rate: int = DEFAULT_SR,
                overrides: dict | None = None, **kwargs) -> "EffectChain":
        """Build from ids like ``"peq>comp>clip"``; overrides are keyed by effect name."""
        overrides = overrides or {}
        names = [n.strip() for n in chain_id.split(">") if n.strip()]
        return cls([make_effect(n, sample_rate, overrides.get(n), **kwargs) for n in names])

    @property
    def chain_id(self) -> str:
        return ">".join(e.name for e in self.effects)

    @property
    def specs(self) -> list[ParamSpec]:
        return [s for e in self.effects for s in e.specs]

    @property
    def n_params(self) -> int:
        return sum(e.n_params for e in self.effects)

    @property
    def differentiable(self) -> bool:
        return all(e.differentiable for e in self.effects)

    @property
    def sample_rate(self) -> int:
        return self.effects[0].sample_rate

    def range_hash(self) -> str:
        return range_table_hash(self.specs)

    def _slices(self):
        start = 0
        for e in self.effects:
            yield e, slice(start, start + e.n_params)
            start += e.n_params

    def __call__(self, x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Differentiable path; output is peak-normalized like every effect input."""
        for effect, sl in self._slices():
            x = effect(peak_normalize_tensor(x), q[..., sl])
        return peak_normalize_tensor(x)

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        """Reference path (synthesis implementations); output peak-normalized."""
        if len(q) != self.n_params:
            raise ValueError(f"chain takes {self.n_params} parameters, got {len(q)}")
        for effect, sl in self._slices():
            x = effect.render(peak_normalize(x), ParamVector(q.values[sl]))
        return peak_normalize(x)

    def nonsmooth(self, q: np.ndarray, eps: float) -> np.ndarray:
        return np.concatenate([e.nonsmooth(q[sl], eps) for e, sl in self._slices()])

    def initial_q(self) -> np.ndarray:
        return np.concatenate([e.initial_q() for e in self.effects])

    def reflections(self, q: np.ndarray) -> list[np.ndarray]:
        """One candidate per effect reflection, other effects' parameters unchanged."""
        out = []
        for effect, sl in self._slices():
            for r in effect.reflections(np.asarray(q)[sl]):
                cand = np.array(q, dtype=np.float64)
                cand[sl] = r
                out.append(cand)
        return out

    def __repr__(self):
        return f"EffectChain({self.chain_id!r})"
