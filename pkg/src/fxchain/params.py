"""Parameter metadata and the normalized <-> denormalized mapping.

Linear parameters use an affine map of ``q`` in [0, 1]; logarithmic ones an
exponential map, so the midpoint of a log range is its geometric mean.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch


class LengthMismatch(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    min: float
    max: float
    scale: str = "linear"
    unit: str = ""

    def __post_init__(self):
        if not self.min < self.max:
            raise ValueError(f"{self.name}: min must be below max")
        if self.scale not in ("linear", "logarithmic"):
            raise ValueError(f"{self.name}: unknown scale {self.scale!r}")
        if self.scale == "logarithmic" and self.min <= 0:
            raise ValueError(f"{self.name}: logarithmic scale needs min > 0")

    @property
    def log(self) -> bool:
        return self.scale == "logarithmic"

    def to_dict(self) -> dict:
        return {"name": self.name, "min": self.min, "max": self.max,
                "scale": self.scale, "unit": self.unit}


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    kind: str = "normalized"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.kind not in ("normalized", "denormalized"):
            raise ValueError(f"unknown ParamVector kind {self.kind!r}")
        if self.kind == "normalized" and np.any((v < 0) | (v > 1)):
            raise OutOfRange("normalized values must lie in [0, 1]")

    def __len__(self):
        return self.values.size


def _check_lengths(n: int, specs: Sequence[ParamSpec]):
    if n != len(specs):
        raise LengthMismatch(f"got {n} values for {len(specs)} parameters")


def denormalize(q: ParamVector, specs: Sequence[ParamSpec]) -> ParamVector:
    if q.kind != "normalized":
        raise ValueError("denormalize expects a normalized vector")
    _check_lengths(len(q), specs)
    out = np.empty(len(q))
    for i, (qc, s) in enumerate(zip(q.values, specs)):
        if s.log:
            out[i] = np.exp((np.log(s.max) - np.log(s.min)) * qc) * s.min
        else:
            out[i] = (s.max - s.min) * qc + s.min
    return ParamVector(out, "denormalized")


def normalize(p: ParamVector, specs: Sequence[ParamSpec]) -> ParamVector:
    _check_lengths(len(p), specs)
    out = np.empty(len(p))
    for i, (pc, s) in enumerate(zip(p.values, specs)):
        # one ulp of slack so roundtrips through denormalize stay valid
        tol = 1e-12 * max(abs(s.min), abs(s.max), 1.0)
        if pc < s.min - tol or pc > s.max + tol:
            raise OutOfRange(f"{s.name}={pc} outside [{s.min}, {s.max}]")
        if s.log:
            qc = (np.log(pc) - np.log(s.min)) / (np.log(s.max) - np.log(s.min))
        else:
            qc = (pc - s.min) / (s.max - s.min)
        out[i] = min(max(qc, 0.0), 1.0)
    return ParamVector(out, "normalized")


def denormalize_tensor(q: torch.Tensor, specs: Sequence[ParamSpec]) -> torch.Tensor:
    """Differentiable denormalize over the last axis of ``q``."""
    _check_lengths(q.shape[-1], specs)
    lo = torch.tensor([s.min for s in specs], dtype=q.dtype)
    hi = torch.tensor([s.max for s in specs], dtype=q.dtype)
    is_log = torch.tensor([s.log for s in specs])
    lin = (hi - lo) * q + lo
    log_lo = torch.log(torch.where(is_log, lo, torch.ones_like(lo)))
    log_hi = torch.log(torch.where(is_log, hi, torch.ones_like(hi)))
    expo = torch.exp((log_hi - log_lo) * q + log_lo)
    return torch.where(is_log, expo, lin)


def range_table_hash(specs: Sequence[ParamSpec]) -> str:
    blob = json.dumps([s.to_dict() for s in specs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_overrides(specs: Sequence[ParamSpec], overrides: dict | None) -> list[ParamSpec]:
    """Replace range fields from a ``{name: {min, max, scale}}`` mapping."""
    if not overrides:
        return list(specs)
    names = {s.name for s in specs}
    unknown = set(overrides) - names
    if unknown:
        raise KeyError(f"unknown parameters in overrides: {sorted(unknown)}")
    out = []
    for s in specs:
        o = overrides.get(s.name)
        out.append(replace(s, **o) if o else s)
    return out


# Default ranges. The source only says which parameters are linear vs.
# logarithmic; these bounds bracket typical mastering settings.
def peq_specs() -> list[ParamSpec]:
    specs = []
    bands = [("low_shelf", 20.0, 500.0), ("peak1", 100.0, 10000.0),
             ("peak2", 100.0, 10000.0), ("peak3", 100.0, 10000.0),
             ("high_shelf", 1000.0, 16000.0)]
    for name, fmin, fmax in bands:
        specs += [
            ParamSpec(f"{name}_freq", fmin, fmax, "logarithmic", "Hz"),
            ParamSpec(f"{name}_gain", -12.0, 12.0, "linear", "dB"),
            ParamSpec(f"{name}_q", 0.3, 4.0, "linear", ""),
        ]
    return specs


def geq_specs(n_bands: int = 10) -> list[ParamSpec]:
    return [ParamSpec(f"band{k}_gain", -12.0, 12.0, "linear", "dB") for k in range(n_bands)]


def compressor_specs() -> list[ParamSpec]:
    return [
        ParamSpec("threshold", -50.0, 0.0, "linear", "dB"),
        ParamSpec("ratio", 1.0, 20.0, "logarithmic", ""),
        ParamSpec("attack", 0.1, 100.0, "logarithmic", "ms"),
        ParamSpec("release", 10.0, 1000.0, "logarithmic", "ms"),
        ParamSpec("knee", 0.0, 18.0, "linear", "dB"),
    ]


def simple_compressor_specs() -> list[ParamSpec]:
    return [
        ParamSpec("threshold", -50.0, 0.0, "linear", "dB"),
        ParamSpec("ratio", 1.0, 20.0, "logarithmic", ""),
        ParamSpec("time", 0.1, 1000.0, "logarithmic", "ms"),
        ParamSpec("knee", 0.0, 18.0, "linear", "dB"),
    ]


def clipper_specs() -> list[ParamSpec]:
    return [
        ParamSpec("gain", 0.0, 24.0, "linear", "dB"),
        ParamSpec("offset", -0.5, 0.5, "linear", ""),
        ParamSpec("hardness", 0.0, 2.0, "linear", ""),
    ]


def polynomial_specs(n_terms: int = 24) -> list[ParamSpec]:
    return [ParamSpec(f"g{h}", -1.0, 1.0, "linear", "") for h in range(n_terms)]
