"""Parameter estimation: paired gradient-descent fitting and blind analysis networks.

The blind estimator follows the auto-encoder setup: an analysis network maps
wet audio ``y`` to normalized parameters, the analysis chain renders ``x``
with them, and training minimizes the log-Mel L1 between the rendering and
``y`` (or, as a baseline, the parameter MSE).
"""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .chain import EffectChain
from .checkpoint import CheckpointError
from .data import DatasetRecord, derive_seed, draw_q, synthesize_dataset
from .losses import (MelConfig, log_mel_l1_from_mel, loss_mel_l1, mel_tensor, mse_audio,
                     mse_params, rms_normalize_tensor)
from .params import LengthMismatch, ParamSpec, ParamVector
from .audio import AudioBuffer, peak_normalize, rms_normalize

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


class EmptyDataset(ValueError):
    pass


# --- paired fitting ------------------------------------------------------------

@dataclass
class FitConfig:
    steps: int = 1000
    learning_rate: float = 0.05
    patience: int = 100
    min_improvement: float = 0.0
    tolerance: float = 1e-7
    init: Sequence[float] | None = None
    restart: bool = False
    restart_spread: float = 0.4
    refine_factor: float = 0.3
    beta2: float = 0.999
    seed: int = 0


@dataclass
class FitResult:
    trajectory: list[np.ndarray]
    losses: list[float]
    q: ParamVector
    final_loss: float
    steps: int
    restarts: int = 0


def _logit(q):
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-6, 1 - 1e-6)
    return np.log(q / (1 - q))


def fit_paired(x: AudioBuffer, y: AudioBuffer, chain: EffectChain,
               mel_cfg: MelConfig | None = None, cfg: FitConfig | None = None) -> FitResult:
    """Adam on unconstrained logits ``s`` with ``q = sigmoid(s)``, minimizing Lyy(chain(x; q), y).

    ``cfg.steps`` is the total budget of loss evaluations. A plateau is ``patience``
    steps without a relative improvement of ``min_improvement``; it ends the fit, or
    with ``restart`` set, restarts Adam so the remaining budget is spent escaping the
    local minimum. For each clearly better point the restarts are, in order: the
    chain's reflections of it (sign images that the loss barely distinguishes), the
    point itself at ``refine_factor`` times the previous rate, and then the point
    perturbed by Gaussian noise of width ``restart_spread`` in q.
    Returns the best iterate overall.
    """
    cfg = cfg or FitConfig()
    mel_cfg = mel_cfg or MelConfig(sample_rate=x.sample_rate)
    if len(x) != len(y):
        raise LengthMismatch("x and y differ in length")
    rng = np.random.default_rng(cfg.seed)
    init = chain.initial_q() if cfg.init is None else np.asarray(cfg.init, float)
    xt = torch.tensor(np.array(peak_normalize(x).samples))
    with torch.no_grad():
        target = mel_tensor(rms_normalize_tensor(torch.tensor(np.array(y.samples))), mel_cfg)

    def start(q0, lr=cfg.learning_rate):
        s = torch.tensor(_logit(q0), requires_grad=True)
        return s, torch.optim.Adam([s], lr=lr, betas=(0.9, cfg.beta2))

    def evaluate(q):
        return log_mel_l1_from_mel(mel_tensor(rms_normalize_tensor(chain(xt, q), strict=False),
                                              mel_cfg), target, mel_cfg.log_floor)

    s, opt = start(init)
    traj, losses = [], []
    best, best_q, restarts = math.inf, init, 0
    pending: list[tuple[np.ndarray, float]] = []
    queued_at, lr = math.inf, cfg.learning_rate
    run_best, since_best = math.inf, 0
    for step in range(cfg.steps + 1):
        q = torch.sigmoid(s)
        loss = evaluate(q)
        value = float(loss.detach())
        traj.append(q.detach().numpy().copy())
        losses.append(value)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at step {step}", traj)
        if value < best:
            best, best_q = value, traj[-1]
        if value < run_best * (1 - cfg.min_improvement) - 1e-12:
            run_best, since_best = value, 0
        else:
            since_best += 1
        if best < cfg.tolerance or step == cfg.steps:
            break
        if since_best >= cfg.patience:
            if not cfg.restart:
                break
            restarts += 1
            run_best, since_best = math.inf, 0
            if best < queued_at * 0.98:
                # clearly better point: try its reflections, then refine it at a lower rate
                queued_at = best
                pending = [(r, cfg.learning_rate) for r in chain.reflections(best_q)]
                pending.append((best_q, max(lr * cfg.refine_factor, cfg.learning_rate * 1e-2)))
            if pending:
                q0, lr = pending.pop(0)
            else:
                q0 = best_q + rng.normal(0.0, cfg.restart_spread, size=len(best_q))
                lr = cfg.learning_rate
            s, opt = start(np.clip(q0, 1e-6, 1 - 1e-6) if q0 is best_q else np.clip(q0, 0.02, 0.98), lr)
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
    return FitResult(traj, losses, ParamVector(np.clip(best_q, 0, 1)), best, step, restarts)


# --- analysis network ----------------------------------------------------------

class MelStatsEncoder(nn.Module):
    """Fixed embedding: per-band mean and std of the log-Mel spectrogram plus waveform moments.

    The moments (mean, skewness, kurtosis, log crest factor, spread of frame
    levels) keep sign information that magnitude spectra drop, e.g. the
    asymmetry an offset clipper leaves.
    """

    n_moments = 5

    def __init__(self, mel_cfg: MelConfig):
        super().__init__()
        self.mel_cfg = mel_cfg

    @property
    def dim(self) -> int:
        return 2 * self.mel_cfg.mel_bands + self.n_moments

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        peak = y.abs().amax(dim=-1, keepdim=True).clamp(min=1e-9)
        y = y / peak
        logmel = torch.log(mel_tensor(y, self.mel_cfg) + self.mel_cfg.log_floor)
        centered = y - y.mean(dim=-1, keepdim=True)
        var = centered.pow(2).mean(dim=-1).clamp(min=1e-12)
        frames = y.unfold(-1, self.mel_cfg.fft_size, self.mel_cfg.hop)
        frame_db = 10 * torch.log10(frames.pow(2).mean(dim=-1) + 1e-10)
        moments = torch.stack([
            y.mean(dim=-1) * 10,
            centered.pow(3).mean(dim=-1) / var.pow(1.5),
            centered.pow(4).mean(dim=-1) / var.pow(2),
            -0.5 * torch.log(var),
            frame_db.std(dim=-1) / 10,
        ], dim=-1)
        return torch.cat([logmel.mean(dim=-1), logmel.std(dim=-1), moments], dim=-1)


class AnalysisNetwork(nn.Module):
    """Encoder followed by an MLP (hidden layers with BatchNorm + PReLU) and a sigmoid."""

    def __init__(self, n_params: int, mel_cfg: MelConfig, n_samples: int,
                 width_divisor: int = 8):
        super().__init__()
        self.encoder = MelStatsEncoder(mel_cfg)
        self.n_samples = n_samples
        self.width_divisor = width_divisor
        sizes = [self.encoder.dim] + [w // width_divisor for w in (2048, 1024, 512)]
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [nn.Linear(a, b), nn.BatchNorm1d(b), nn.PReLU()]
        layers.append(nn.Linear(sizes[-1], n_params))
        self.head = nn.Sequential(*layers)
        self.register_buffer("feat_mean", torch.zeros(self.encoder.dim))
        self.register_buffer("feat_std", torch.ones(self.encoder.dim))

    @property
    def n_params(self) -> int:
        return self.head[-1].out_features

    def embed(self, y: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder(y.to(torch.float64)).to(torch.float32)

    def set_feature_stats(self, feats: torch.Tensor):
        self.feat_mean.copy_(feats.mean(dim=0))
        self.feat_std.copy_(feats.std(dim=0).clamp(min=1e-4) if len(feats) > 1
                            else torch.ones_like(self.feat_std))

    def from_embedding(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head((emb - self.feat_mean) / self.feat_std))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.from_embedding(self.embed(y))


def predict(net: AnalysisNetwork, y: AudioBuffer) -> ParamVector:
    if len(y) != net.n_samples:
        raise LengthMismatch(f"network expects {net.n_samples} samples, got {len(y)}")
    net.eval()
    with torch.no_grad():
        q = net(torch.tensor(np.array(y.samples))[None])[0]
    return ParamVector(q.double().numpy())


# --- blind training ------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 400
    epoch_size: int = 430
    patience_lr: int = 30
    patience_stop: int = 150
    seed: int = 0
    objective: str = "lyy"
    width_divisor: int = 8
    q_draws: int = 1

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "epoch_size",
                     "patience_lr", "patience_stop", "width_divisor", "q_draws"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience_lr >= self.patience_stop:
            raise ValueError("patience_lr must be smaller than patience_stop")
        if self.objective not in ("lyy", "mqq"):
            raise ValueError("objective must be 'lyy' or 'mqq'")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def _stack(records, attr):
    return torch.tensor(np.stack([getattr(r, attr).samples for r in records]))


class _Batches:
    """Tensors cached once per split so epochs only run the head and the chain.

    ``extra`` holds additional (clip index, q, y) draws that share the dry
    signals of ``records``; only their embeddings and target spectra are kept.
    """

    def __init__(self, records: Sequence[DatasetRecord], net: AnalysisNetwork, mel_cfg: MelConfig,
                 extra: Iterable[tuple[int, ParamVector, AudioBuffer]] = ()):
        self.x = _stack(records, "x").float()
        items = itertools.chain(((i, r.q, r.y) for i, r in enumerate(records)), extra)
        clip, qs, embs, mels = [], [], [], []
        while chunk := list(itertools.islice(items, 32)):
            y = torch.tensor(np.stack([c[2].samples for c in chunk]))
            clip += [c[0] for c in chunk]
            qs += [c[1].values for c in chunk]
            embs.append(net.embed(y))
            with torch.no_grad():
                mels.append(mel_tensor(rms_normalize_tensor(y), mel_cfg).float())
        self.clip = torch.tensor(clip)
        self.q = torch.tensor(np.stack(qs)).float()
        self.emb, self.mel_y = torch.cat(embs), torch.cat(mels)

    def __len__(self):
        return len(self.q)


def _extra_draws(records, synth_chain: EffectChain, n_draws: int, seed: int):
    """``n_draws - 1`` further q ~ U(0,1)^C per training clip, rendered with ``synth_chain``."""
    for d in range(1, n_draws):
        for i, rec in enumerate(records):
            q = draw_q(synth_chain.n_params, derive_seed(seed, 3, d, i))
            yield i, q, synth_chain.render(rec.x, q)


def _objective(net, batch: _Batches, idx, chain, mel_cfg, objective, render=False):
    q_hat = net.from_embedding(batch.emb[idx])
    if objective == "mqq":
        return ((q_hat - batch.q[idx]) ** 2).mean(dim=-1)
    if render:
        # evaluation-only path (e.g. hybrid compressor), no gradient needed
        y_hat = torch.stack([
            torch.tensor(chain.render(AudioBuffer(batch.x[batch.clip[i]].double().numpy(),
                                                  chain.sample_rate),
                                      ParamVector(np.clip(q.double().numpy(), 0, 1))).samples)
            for i, q in zip(idx.tolist(), q_hat)]).float()
    else:
        y_hat = chain(batch.x[batch.clip[idx]], q_hat)
    mel_hat = mel_tensor(rms_normalize_tensor(y_hat, strict=False), mel_cfg)
    return log_mel_l1_from_mel(mel_hat, batch.mel_y[idx], mel_cfg.log_floor)


def _validate(net, batch, chain, mel_cfg, objective, render):
    net.eval()
    with torch.no_grad():
        vals = [_objective(net, batch, torch.arange(i, min(i + 32, len(batch))), chain, mel_cfg,
                           objective, render) for i in range(0, len(batch), 32)]
    return float(torch.cat(vals).mean())


def train_blind(train: Sequence[DatasetRecord], val: Sequence[DatasetRecord],
                chain: EffectChain, mel_cfg: MelConfig | None = None,
                cfg: TrainConfig | None = None, synth_chain: EffectChain | None = None
                ) -> tuple[AnalysisNetwork, TrainHistory]:
    """Train an analysis network on (x, y) pairs; returns the best-validation checkpoint.

    With ``objective="lyy"`` only x and y are used; ``"mqq"`` regresses the stored q.
    Validation uses the chain's rendering path when the chain is not differentiable.
    With ``cfg.q_draws > 1`` every training clip is also rendered by ``synth_chain``
    with further random parameter draws, and epochs sample from the enlarged pool.
    """
    cfg = cfg or TrainConfig()
    if not train or not val:
        raise EmptyDataset("training and validation sets must be non-empty")
    mel_cfg = mel_cfg or MelConfig(sample_rate=train[0].x.sample_rate)
    torch.manual_seed(cfg.seed)
    gen = np.random.default_rng(derive_seed(cfg.seed, 1))
    net = AnalysisNetwork(chain.n_params, mel_cfg, len(train[0].x), cfg.width_divisor)
    if cfg.q_draws > 1 and synth_chain is None:
        raise ValueError("q_draws > 1 needs the synthesis chain")
    extra = _extra_draws(train, synth_chain, cfg.q_draws, cfg.seed) if cfg.q_draws > 1 else ()
    tr, va = _Batches(train, net, mel_cfg, extra), _Batches(val, net, mel_cfg)
    net.set_feature_stats(tr.emb)
    render_val = cfg.objective == "lyy" and any(
        getattr(e, "hybrid", False) or not e.differentiable for e in chain.effects)
    if cfg.objective == "lyy" and not chain.differentiable:
        raise ValueError(f"chain {chain.chain_id!r} is not differentiable")

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    hist = TrainHistory()
    best_state, stale, stale_lr = copy.deepcopy(net.state_dict()), 0, 0
    for epoch in range(cfg.max_epochs):
        net.train()
        order = np.concatenate([gen.permutation(len(tr))
                                for _ in range(-(-cfg.epoch_size // len(tr)))])[:cfg.epoch_size]
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            if len(idx) < 2:
                continue  # BatchNorm needs more than one item
            loss = _objective(net, tr, idx, chain, mel_cfg, cfg.objective).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"training loss became {float(loss)} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_loss = _validate(net, va, chain, mel_cfg, cfg.objective, render_val)
        hist.train_loss.append(total / len(order))
        hist.val_loss.append(val_loss)
        hist.learning_rate.append(opt.param_groups[0]["lr"])
        log.info("epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], val_loss)
        if val_loss < hist.best_val:
            hist.best_val, hist.best_epoch = val_loss, epoch
            best_state, stale, stale_lr = copy.deepcopy(net.state_dict()), 0, 0
        else:
            stale += 1
            stale_lr += 1
            if stale >= cfg.patience_stop:
                break
            if stale_lr >= cfg.patience_lr:
                for g in opt.param_groups:
                    g["lr"] /= 10
                stale_lr = 0
    net.load_state_dict(best_state)
    net.eval()
    return net, hist


# --- evaluation ----------------------------------------------------------------

@dataclass
class MetricSummary:
    myy: float
    lyy: float
    mqq: float
    myy_std: float
    lyy_std: float
    mqq_std: float
    runs: int

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}


def _summary(per_run: list[tuple[float, float, float]]) -> MetricSummary:
    a = np.array(per_run, dtype=np.float64)
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return MetricSummary(*map(float, mean), *map(float, std), runs=len(per_run))


def audio_metrics(y_hat: AudioBuffer, y: AudioBuffer, mel_cfg: MelConfig) -> tuple[float, float]:
    a, b = rms_normalize(y_hat), rms_normalize(y)
    return mse_audio(a, b), loss_mel_l1(a, b, mel_cfg)


def evaluate(net: AnalysisNetwork | Callable[[DatasetRecord], ParamVector],
             clips: Sequence, chain_a: EffectChain, chain_s: EffectChain,
             mel_cfg: MelConfig | None = None, runs: int = 10, seed: int = 0) -> dict:
    """Mean metrics over ``runs`` re-synthesized draws of the test clips.

    ``net`` may be an :class:`AnalysisNetwork` or any callable mapping a record
    to a normalized estimate. Renders use ``chain_a.render``, so a hybrid
    compressor estimates with the proxy but renders with the DSP compressor.
    Includes the random-estimate and dry-vs-wet baselines.
    """
    if not clips:
        raise EmptyDataset("test set is empty")
    first = getattr(clips[0], "audio", clips[0])
    mel_cfg = mel_cfg or MelConfig(sample_rate=first.sample_rate)
    same_params = [s.to_dict() for s in chain_a.specs] == [s.to_dict() for s in chain_s.specs]
    estimator = (lambda r: predict(net, r.y)) if isinstance(net, AnalysisNetwork) else net
    est, rnd, dry = [], [], []
    for run in range(runs):
        records = synthesize_dataset(clips, chain_s, derive_seed(seed, run))
        e_vals, r_vals, d_vals = [], [], []
        for i, rec in enumerate(records):
            q_hat = estimator(rec)
            q_rand = draw_q(chain_a.n_params, derive_seed(seed, run, i, 7))
            for q, sink in ((q_hat, e_vals), (q_rand, r_vals)):
                myy, lyy = audio_metrics(chain_a.render(rec.x, q), rec.y, mel_cfg)
                mqq = mse_params(q, rec.q) if same_params else math.nan
                sink.append((myy, lyy, mqq))
            d_vals.append((*audio_metrics(rec.x, rec.y, mel_cfg), math.nan))
        est.append(tuple(np.mean(e_vals, axis=0)))
        rnd.append(tuple(np.mean(r_vals, axis=0)))
        dry.append(tuple(np.mean(d_vals, axis=0)))
    return {"estimate": _summary(est), "random_q": _summary(rnd), "dry_vs_wet": _summary(dry)}


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, net: AnalysisNetwork, chain: EffectChain, mel_cfg: MelConfig):
    checkpoint.save(path, net, {
        "kind": "analysis",
        "chain_id": chain.chain_id,
        "n_params": net.n_params,
        "n_samples": net.n_samples,
        "width_divisor": net.width_divisor,
        "mel": mel_cfg.to_dict(),
        "specs": [s.to_dict() for s in chain.specs],
    })


def load_checkpoint(path, chain: EffectChain | None = None) -> tuple[AnalysisNetwork, dict]:
    meta, arrays = checkpoint.read_meta(path)
    if meta.get("kind") != "analysis":
        raise CheckpointError(f"{path}: not an analysis-network checkpoint")
    if chain is not None:
        if chain.chain_id != meta["chain_id"]:
            raise CheckpointError(f"checkpoint is for chain {meta['chain_id']!r}")
        if [s.to_dict() for s in chain.specs] != meta["specs"]:
            raise CheckpointError("parameter ranges differ from the checkpoint")
    net = AnalysisNetwork(meta["n_params"], MelConfig(**meta["mel"]), meta["n_samples"],
                          meta["width_divisor"])
    checkpoint.load_into(net, meta, arrays)
    meta["specs"] = [ParamSpec(**s) for s in meta["specs"]]
    return net, meta
