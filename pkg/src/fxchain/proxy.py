"""Neural proxy of the DSP compressor: a causal TCN with FiLM conditioning.

The network predicts a per-sample gain in (0, 1) through a sigmoid and the
output is ``gain * x``, so it can only attenuate.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .audio import DEFAULT_SR, AudioBuffer
from .checkpoint import CheckpointError
from .data import derive_seed
from .effects.base import Effect
from .effects.dynamics import FLOOR_LIN, CompressorParams, compress
from .params import ParamSpec, ParamVector, apply_overrides, compressor_specs, denormalize

log = logging.getLogger(__name__)


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class ProxyConfig:
    channels: int = 8
    layers: int = 7
    kernel: int = 5
    dilation_growth: int = 4
    cond_width: int = 16

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilation_growth ** i for i in range(self.layers))


class FiLMBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, cond_width: int):
        super().__init__()
        self.pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(c_in, c_out, kernel, dilation=dilation)
        self.film = nn.Linear(cond_width, 2 * c_out)
        self.act = nn.PReLU(c_out)
        self.res = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, h, cond):
        z = self.conv(nn.functional.pad(h, (self.pad, 0)))
        scale, shift = self.film(cond)[..., None].chunk(2, dim=1)
        return self.act(z * (1 + scale) + shift) + self.res(h)


class ProxyModel(nn.Module):
    """Inputs: the signal and its log level; conditioning: 5 normalized compressor parameters."""

    n_cond = 5

    def __init__(self, cfg: ProxyConfig = ProxyConfig(), specs: Sequence[ParamSpec] | None = None):
        super().__init__()
        self.cfg = cfg
        self.specs = list(specs or compressor_specs())
        self.cond = nn.Sequential(nn.Linear(self.n_cond, cfg.cond_width), nn.ReLU(),
                                  nn.Linear(cfg.cond_width, cfg.cond_width), nn.ReLU())
        chans = [2] + [cfg.channels] * cfg.layers
        self.blocks = nn.ModuleList(
            FiLMBlock(chans[i], chans[i + 1], cfg.kernel, cfg.dilation_growth ** i, cfg.cond_width)
            for i in range(cfg.layers))
        self.out = nn.Conv1d(cfg.channels, 1, 1)

    def gain(self, x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Per-sample gain in (0, 1) for (batch, time) signals and (batch, 5) parameters."""
        level = (20 * torch.log10(torch.clamp(x.abs(), min=FLOOR_LIN)) + 60) / 60
        h = torch.stack([x, level], dim=1)
        cond = self.cond(q)
        for block in self.blocks:
            h = block(h, cond)
        return torch.sigmoid(self.out(h))[:, 0]

    def forward(self, x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return self.gain(x, q) * x


def proxy_forward(model: ProxyModel, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        y = model(torch.tensor(np.array(x.samples), dtype=dtype)[None],
                  torch.tensor(np.array(q.values), dtype=dtype)[None])
    return x.with_samples(y[0].double().numpy())


def hybrid_render(x: AudioBuffer, q: ParamVector, specs: Sequence[ParamSpec] | None = None
                  ) -> AudioBuffer:
    """Render with the reference DSP compressor from the proxy's normalized parameters."""
    p = denormalize(q, specs or compressor_specs())
    return compress(x, CompressorParams(*p.values), x.sample_rate)


def toy_specs() -> list[ParamSpec]:
    """Narrow compressor ranges for the desk-scale proxy task."""
    return apply_overrides(compressor_specs(), {
        "threshold": {"min": -30.0, "max": -10.0},
        "ratio": {"min": 1.0, "max": 6.0},
        "attack": {"min": 1.0, "max": 20.0},
        "release": {"min": 20.0, "max": 200.0},
        "knee": {"min": 0.0, "max": 6.0},
    })


def toy_corpus(n: int, duration: float, seed: int = 0, sample_rate: int = DEFAULT_SR
               ) -> list[AudioBuffer]:
    """Noise bursts and amplitude-modulated tones with level changes the compressor reacts to."""
    out = []
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        if i % 2 == 0:
            env = np.zeros_like(t)
            for _ in range(rng.integers(3, 8)):
                start, length = rng.uniform(0, duration), rng.uniform(0.02, 0.3)
                env += rng.uniform(0.05, 1.0) * ((t >= start) & (t < start + length))
            sig = env * rng.uniform(-1, 1, len(t))
        else:
            f0, fm = rng.uniform(80, 2000), rng.uniform(0.5, 8)
            env = 0.5 + 0.5 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
            sig = env ** 2 * np.sin(2 * np.pi * f0 * t)
        peak = np.abs(sig).max()
        out.append(AudioBuffer(sig / peak if peak > 0 else sig + 1e-3, sample_rate))
    return out


def reference_output(x: np.ndarray, q: np.ndarray, specs, fs) -> np.ndarray:
    p = CompressorParams(*denormalize(ParamVector(q), specs).values)
    return compress(AudioBuffer(x, fs), p, fs).samples


@dataclass
class ProxyTrainConfig:
    steps: int = 600
    batch_size: int = 8
    segment: float = 0.5
    learning_rate: float = 3e-3
    seed: int = 0


def _segments(corpus, n_seg, batch, rng):
    idx = rng.integers(0, len(corpus), size=batch)
    out = []
    for i in idx:
        s = corpus[i].samples
        off = rng.integers(0, len(s) - n_seg + 1)
        out.append(s[off:off + n_seg])
    return np.stack(out)


def make_examples(corpus: Sequence[AudioBuffer], specs, n: int, segment: float, seed: int,
                  sampler: Callable[[np.random.Generator], np.ndarray] | None = None):
    """(x, q, y) triples with y from the reference compressor."""
    rng = np.random.default_rng(seed)
    fs = corpus[0].sample_rate
    n_seg = int(round(segment * fs))
    x = _segments(corpus, n_seg, n, rng)
    q = np.stack([sampler(rng) if sampler else rng.uniform(0, 1, 5) for _ in range(n)])
    y = np.stack([reference_output(xi, qi, specs, fs) for xi, qi in zip(x, q)])
    return x, q, y


def proxy_mae(model: ProxyModel, examples) -> float:
    x, q, y = (torch.tensor(a, dtype=torch.float32) for a in examples)
    model.eval()
    with torch.no_grad():
        return float((model(x, q) - y).abs().mean())


def proxy_train(corpus: Sequence[AudioBuffer], specs: Sequence[ParamSpec] | None = None,
                cfg: ProxyTrainConfig = ProxyTrainConfig(), model_cfg: ProxyConfig = ProxyConfig(),
                sampler: Callable[[np.random.Generator], np.ndarray] | None = None,
                reference: Callable = reference_output) -> ProxyModel:
    """Fit the proxy to the reference compressor by mean absolute error on fresh random batches."""
    if not corpus:
        raise EmptyCorpus("proxy training needs at least one signal")
    specs = list(specs or compressor_specs())
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    model = ProxyModel(model_cfg, specs)
    fs = corpus[0].sample_rate
    n_seg = int(round(cfg.segment * fs))
    if any(len(c) < n_seg for c in corpus):
        raise ValueError("corpus signals must be at least one segment long")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    model.train()
    for step in range(cfg.steps):
        x = _segments(corpus, n_seg, cfg.batch_size, rng)
        q = np.stack([sampler(rng) if sampler else rng.uniform(0, 1, 5)
                      for _ in range(cfg.batch_size)])
        y = np.stack([reference(xi, qi, specs, fs) for xi, qi in zip(x, q)])
        x_t, q_t, y_t = (torch.tensor(a, dtype=torch.float32) for a in (x, q, y))
        loss = (model(x_t, q_t) - y_t).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 100 == 0:
            log.info("proxy step %d mae %.5f", step, loss.item())
    model.eval()
    return model


def save_proxy(path, model: ProxyModel):
    checkpoint.save(path, model, {"kind": "proxy", "config": asdict(model.cfg),
                                  "specs": [s.to_dict() for s in model.specs]})


def load_proxy(path) -> ProxyModel:
    meta, arrays = checkpoint.read_meta(path)
    if meta.get("kind") != "proxy":
        raise CheckpointError(f"{path}: not a proxy checkpoint")
    model = ProxyModel(ProxyConfig(**meta["config"]), [ParamSpec(**s) for s in meta["specs"]])
    checkpoint.load_into(model, meta, arrays)
    return model


class ProxyCompressor(Effect):
    """Proxy compressor for the analysis chain.

    In hybrid mode gradients still come from the proxy, but ``render`` uses the
    DSP compressor with the same normalized parameters.
    """

    def __init__(self, sample_rate: int = DEFAULT_SR, model: ProxyModel | None = None,
                 proxy_path=None, hybrid: bool = False):
        if model is None:
            if proxy_path is None:
                raise ValueError("a proxy compressor needs a trained model or proxy_path")
            model = load_proxy(proxy_path)
        super().__init__(model.specs, sample_rate)
        self.model = model
        self.hybrid = hybrid
        self.name = "comp_hybrid" if hybrid else "comp_proxy"
        for prm in model.parameters():
            prm.requires_grad_(False)

    def __call__(self, x, q):
        squeeze = x.dim() == 1
        x2 = x[None] if squeeze else x
        q2 = q.reshape(-1, self.n_params).expand(x2.shape[0], -1)
        dtype = next(self.model.parameters()).dtype
        out = self.model(x2.to(dtype), q2.to(dtype)).to(x.dtype)
        return out[0] if squeeze else out

    def render(self, x: AudioBuffer, q: ParamVector) -> AudioBuffer:
        if self.hybrid:
            return hybrid_render(x, q, self.specs)
        return proxy_forward(self.model, x, q)
