"""Command-line entry point: ``fxchain {synth,fit,train,eval,gradcheck,proxy-train}``.

Configuration is a YAML tree (see ``DEFAULT_CONFIG`` for every key); ``--seed``,
``--out``, ``--corpus`` and ``--set key.path=value`` override it. Reports are
written as canonical JSON plus CSV and carry the resolved config, seeds and
package version, so reruns with the same inputs produce identical bytes.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .audio import AudioBuffer, MismatchedLength, SilentSignal, gen_test_signal, mono_downmix
from .autodiff import corrupt_backward, grad_check
from .chain import EffectChain
from .checkpoint import CheckpointError
from .data import (CorruptHeader, UnsupportedFormat, derive_seed, extract_clips, load_wav,
                   make_split, manifest_dict, save_wav, synthesize_dataset, synthetic_songs,
                   write_manifest)
from .estimation import (AnalysisNetwork, EmptyDataset, FitConfig, NonFiniteLoss, TrainConfig,
                         evaluate, fit_paired, load_checkpoint, save_checkpoint, train_blind)
from .losses import MelConfig, TooShort, mel_l1_tensor
from .params import LengthMismatch, OutOfRange, denormalize
from .proxy import (EmptyCorpus, ProxyConfig, ProxyModel, ProxyTrainConfig, make_examples, proxy_mae,
                    proxy_train, save_proxy)

log = logging.getLogger("fxchain")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE = 0, 2, 3, 4

# Reference figures from the full-scale MUSDB18 experiment, reported alongside
# toy results for context only.
REFERENCE_FULL_SCALE = {"chain": {"Lyy": 0.40, "Mqq": 0.072}, "proxy_test_mae": 0.0060}

GRADCHECK_EFFECTS = ["peq", "geq", "comp_simple", "clip", "taylor", "chebyshev", "mel_l1"]

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "out",
    "corpus": None,          # directory of WAV songs; null selects the built-in synthetic corpus
    "sample_rate": 44100,
    "synthetic": {"n_songs": 20, "song_duration": 6.0},
    "chain_s": "peq>comp>clip",
    "chain_a": "peq>comp_simple>clip",
    "ranges": {},            # {effect: {param: {min, max, scale}}}, applied to both chains
    "clips": {"duration": 2.0, "per_song": 5},
    "mel": {"fft_size": 2048, "hop": 512, "mel_bands": 128, "log_floor": 1e-5},
    "train": {"learning_rate": 1e-4, "batch_size": 16, "max_epochs": 400, "epoch_size": 430,
              "patience_lr": 30, "patience_stop": 150, "objective": "lyy", "width_divisor": 8, "q_draws": 1},
    "eval": {"runs": 10, "checkpoint": None, "network": "checkpoint"},
    "fit": {"chain": None, "steps": 1000, "learning_rate": 0.1, "beta2": 0.9, "patience": 30,
            "min_improvement": 5e-3, "restart": True, "restart_spread": 0.4,
            "refine_factor": 0.3, "tolerance": 1e-7},
    "gradcheck": {"effects": GRADCHECK_EFFECTS, "draws": 20, "duration": 0.25, "eps": 1e-6,
                  "tolerance": 1e-3, "corrupt_backward": None},
    "proxy": {"steps": 600, "batch_size": 8, "segment": 0.5, "learning_rate": 3e-3,
              "channels": 8, "layers": 7, "kernel": 5, "dilation_growth": 4, "cond_width": 16,
              "test_examples": 16, "checkpoint": None},
    "synth": {"write_wavs": False},
}


class ConfigError(ValueError):
    pass


# --- config ---------------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and not isinstance(val, dict):
            raise ConfigError(f"config key {where!r} must be a mapping")
        if isinstance(base[key], dict) and base[key]:
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a mapping")
    node[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None, sets=()) -> dict:
    user: dict = {}
    if path is not None:
        text = Path(path).read_text()  # OSError maps to the I/O exit code
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path} is not valid YAML: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(user, key, yaml.safe_load(raw))
    for key, val in (overrides or {}).items():
        if val is not None:
            user[key] = val
    cfg = _merge(DEFAULT_CONFIG, user)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    try:
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        _mel(cfg)
        _train_cfg(cfg)
        _chain(cfg, "chain_s")
        for key in ("duration", "per_song"):
            if cfg["clips"][key] <= 0:
                raise ConfigError(f"clips.{key} must be positive")
        if cfg["eval"]["runs"] < 1:
            raise ConfigError("eval.runs must be at least 1")
        if cfg["eval"]["network"] not in ("checkpoint", "random"):
            raise ConfigError("eval.network must be 'checkpoint' or 'random'")
    except (TypeError, KeyError) as err:
        raise ConfigError(f"invalid config: {err}") from err
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _mel(cfg) -> MelConfig:
    return MelConfig(sample_rate=cfg["sample_rate"], **cfg["mel"])


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _chain(cfg, key: str, chain_id: str | None = None) -> EffectChain:
    chain_id = chain_id or cfg[key]
    kwargs = {}
    if "comp_proxy" in chain_id or "comp_hybrid" in chain_id:
        if not cfg["proxy"]["checkpoint"]:
            raise ConfigError("chains with a proxy compressor need proxy.checkpoint")
        kwargs["proxy_path"] = cfg["proxy"]["checkpoint"]
    try:
        return EffectChain.from_id(chain_id, cfg["sample_rate"], cfg["ranges"], **kwargs)
    except (KeyError, ValueError) as err:
        raise ConfigError(f"{key}: {err}") from err


# --- data -------------------------------------------------------------------------

SPLITS = ("train", "validation", "test")


def _songs_by_split(cfg) -> dict:
    if cfg["corpus"] is not None:
        split = make_split(cfg["corpus"], cfg["clips"]["per_song"], cfg["seed"])
        return {"train": split.train, "validation": split.validation, "test": split.test}
    syn = cfg["synthetic"]
    songs = synthetic_songs(syn["n_songs"], syn["song_duration"], cfg["seed"], cfg["sample_rate"])
    if len(songs) < 3:
        raise ConfigError("synthetic.n_songs must be at least 3")
    order = np.random.default_rng(derive_seed(cfg["seed"], 0x5EED)).permutation(len(songs))
    n_test = max(1, int(round(0.15 * len(songs))))
    n_val = max(1, int(round(0.15 * (len(songs) - n_test))))
    parts = {"test": order[:n_test], "validation": order[n_test:n_test + n_val],
             "train": order[n_test + n_val:]}
    return {k: [songs[i] for i in sorted(v)] for k, v in parts.items()}


def _clips(cfg) -> dict:
    songs = _songs_by_split(cfg)
    c = cfg["clips"]
    return {name: extract_clips(songs[name], c["duration"], c["per_song"],
                                derive_seed(cfg["seed"], k))
            for k, name in enumerate(SPLITS)}


def _records(cfg, clips, chain_s) -> dict:
    return {name: synthesize_dataset(clips[name], chain_s, derive_seed(cfg["seed"], 10 + k))
            for k, name in enumerate(SPLITS)}


# --- reports ------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _report(cfg, command: str, body: dict) -> dict:
    # the output location is not an input, so reruns elsewhere give the same bytes
    cfg = {k: v for k, v in cfg.items() if k != "out"}
    return {"command": command, "version": __version__, "config": cfg,
            "seeds": {"master": cfg["seed"]}, **body}


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _out(cfg) -> Path:
    return Path(cfg["out"])


# --- commands -----------------------------------------------------------------------

def cmd_synth(cfg) -> dict:
    chain_s = _chain(cfg, "chain_s")
    clips = _clips(cfg)
    records = _records(cfg, clips, chain_s)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in SPLITS:
        recs = records[name]
        digest = write_manifest(out / f"manifest_{name}.json",
                                manifest_dict(recs, chain_s, cfg["clips"]["duration"],
                                              {"split": name, "seed": cfg["seed"]}))
        qs = np.stack([r.q.values for r in recs]) if recs else np.zeros((0, chain_s.n_params))
        summary[name] = {"records": len(recs), "sha256": digest,
                         "q_mean": [round(float(v), 6) for v in qs.mean(axis=0)] if recs else [],
                         "q_std": [round(float(v), 6) for v in qs.std(axis=0)] if recs else []}
        if cfg["synth"]["write_wavs"]:
            for i, r in enumerate(recs):
                save_wav(out / "wav" / name / f"{i:05d}_x.wav", r.x)
                save_wav(out / "wav" / name / f"{i:05d}_y.wav", r.y)
        print(f"{name}: {len(recs)} records, q mean "
              f"{np.round(qs.mean(axis=0), 3).tolist() if recs else []}")
    report = _report(cfg, "synth", {"splits": summary})
    _write(out / "synth_report.json", _canonical(report))
    return report


def _read_mono(path) -> AudioBuffer:
    return mono_downmix(load_wav(path))


def cmd_fit(cfg, x_path, y_path) -> dict:
    x, y = _read_mono(x_path), _read_mono(y_path)
    if len(x) != len(y) or x.sample_rate != y.sample_rate:
        raise LengthMismatch("x and y must share length and sample rate")
    f = cfg["fit"]
    chain = _chain(cfg, "chain_a", f["chain"])
    if not chain.differentiable:
        raise ConfigError(f"fit needs a differentiable chain, got {chain.chain_id!r}")
    result = fit_paired(x, y, chain, MelConfig(sample_rate=x.sample_rate, **cfg["mel"]),
                        FitConfig(**{k: v for k, v in f.items() if k != "chain"},
                                  seed=cfg["seed"]))
    p_hat = denormalize(result.q, chain.specs)
    report = _report(cfg, "fit", {
        "chain": chain.chain_id,
        "q_hat": [float(v) for v in result.q.values],
        "p_hat": {s.name: float(v) for s, v in zip(chain.specs, p_hat.values)},
        "final_loss": result.final_loss,
        "steps": result.steps,
        "restarts": result.restarts,
        "loss_trajectory": result.losses,
    })
    _write(_out(cfg) / "fit_report.json", _canonical(report))
    print(f"fit {chain.chain_id}: Lyy {result.final_loss:.4f} after {result.steps} steps")
    return report


def cmd_train(cfg) -> dict:
    chain_s, chain_a = _chain(cfg, "chain_s"), _chain(cfg, "chain_a")
    records = _records(cfg, _clips(cfg), chain_s)
    mel_cfg = _mel(cfg)
    net, hist = train_blind(records["train"], records["validation"], chain_a, mel_cfg,
                            _train_cfg(cfg), synth_chain=chain_s)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "analysis.npz", net, chain_a, mel_cfg)
    report = _report(cfg, "train", {
        "chain_a": chain_a.chain_id,
        "best_epoch": hist.best_epoch,
        "best_validation": hist.best_val,
        "train_loss": hist.train_loss,
        "validation_loss": hist.val_loss,
        "learning_rate": hist.learning_rate,
    })
    _write(out / "train_report.json", _canonical(report))
    print(f"trained {chain_a.chain_id}: best validation {hist.best_val:.4f} "
          f"at epoch {hist.best_epoch}")
    return report


CSV_COLUMNS = ["implementation", "encoder", "Myy", "Lyy", "Mqq", "runs", "stddev"]


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6g}"


def eval_rows(chain_a: str, encoder: str, results: dict) -> list[dict]:
    """Table rows: the estimate plus the Random-q and L(x, y) baselines. ``stddev`` is over runs of Lyy."""
    rows = []
    for key, label, enc in (("estimate", chain_a, encoder), ("random_q", "Random q", "-"),
                            ("dry_vs_wet", "L(x, y)", "-")):
        m = results[key]
        rows.append({"implementation": label, "encoder": enc, "Myy": _fmt(m.myy),
                     "Lyy": _fmt(m.lyy), "Mqq": _fmt(m.mqq), "runs": str(m.runs),
                     "stddev": _fmt(m.lyy_std)})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _calibrate_random(net: AnalysisNetwork, emb: torch.Tensor):
    """Scale the output layer of a fresh network so each logit has std pi/sqrt(3) on ``emb``.

    The sigmoid of such a logit is close to U(0, 1), so the untrained network
    guesses like the random-estimate baseline instead of always answering ~0.5.
    """
    net.set_feature_stats(emb)
    net.eval()
    last = net.head[-1]
    with torch.no_grad():
        hidden = net.head[:-1]((emb - net.feat_mean) / net.feat_std)
        logits = last(hidden)
        scale = (np.pi / np.sqrt(3)) / logits.std(dim=0).clamp(min=1e-6)
        last.weight.mul_(scale[:, None])
        last.bias.copy_(-(hidden @ last.weight.T).mean(dim=0))


def cmd_eval(cfg) -> dict:
    chain_s, chain_a = _chain(cfg, "chain_s"), _chain(cfg, "chain_a")
    mel_cfg = _mel(cfg)
    all_clips = _clips(cfg)
    clips = all_clips["test"]
    if not clips:
        raise EmptyDataset("the test split has no clips")
    n_samples = len(clips[0].audio)
    if cfg["eval"]["network"] == "random":
        torch.manual_seed(cfg["seed"])
        net = AnalysisNetwork(chain_a.n_params, mel_cfg, n_samples)
        train_recs = synthesize_dataset(all_clips["train"], chain_s, derive_seed(cfg["seed"], 10))
        y = torch.tensor(np.stack([r.y.samples for r in train_recs]))
        _calibrate_random(net, net.embed(y))
        encoder = "random"
    else:
        path = cfg["eval"]["checkpoint"] or _out(cfg) / "analysis.npz"
        net, _ = load_checkpoint(path, chain_a)
        encoder = "melstats"
    results = evaluate(net, clips, chain_a, chain_s, mel_cfg, cfg["eval"]["runs"],
                       derive_seed(cfg["seed"], 99))
    rows = eval_rows(chain_a.chain_id, encoder, results)
    report = _report(cfg, "eval", {
        "metrics": {k: v.to_dict() for k, v in results.items()},
        "rows": rows,
        "reference_full_scale": REFERENCE_FULL_SCALE,
    })
    out = _out(cfg)
    _write(out / "eval_report.json", _canonical(report))
    _write(out / "eval_report.csv", rows_to_csv(rows))
    print(rows_to_csv(rows), end="")
    return report


def _cosine_envelope(xt, qt):
    """Smooth time-varying gain; lets grad_check exercise the loss on its own."""
    t = torch.linspace(0, 1, xt.shape[-1], dtype=xt.dtype)
    env = sum(qt[k] * torch.cos(torch.pi * k * t) for k in range(len(qt)))
    return xt * (1 + env)


def _gradcheck_row(name, cfg, draw_seed) -> tuple[float, int, int]:
    g = cfg["gradcheck"]
    mel_cfg = _mel(cfg)
    rng = np.random.default_rng(draw_seed)
    x = gen_test_signal("white-noise", g["duration"], int(rng.integers(1 << 31)), cfg["sample_rate"])
    if name == "mel_l1":
        effect, q = _cosine_envelope, rng.uniform(0.05, 0.3, 4)
        y = gen_test_signal("white-noise", g["duration"], int(rng.integers(1 << 31)),
                            cfg["sample_rate"])
    else:
        effect = _chain(cfg, "chain_a", name)
        q = rng.uniform(0.05, 0.95, effect.n_params)
        with torch.no_grad():
            y = x.with_samples(effect(torch.tensor(np.array(x.samples)),
                                      torch.from_numpy(rng.uniform(0.05, 0.95, effect.n_params)))
                               .numpy())
    rep = grad_check(effect, lambda a, b: mel_l1_tensor(a, b, mel_cfg), x, y, q, g["eps"])
    return rep.max_error, int(rep.excluded.sum()), int((~rep.excluded).sum())


def cmd_gradcheck(cfg) -> dict:
    g = cfg["gradcheck"]
    rows = []
    for k, name in enumerate(g["effects"]):
        worst, excluded, checked = 0.0, 0, 0
        with (corrupt_backward(g["corrupt_backward"]) if g["corrupt_backward"]
              else contextlib.nullcontext()):
            for d in range(g["draws"]):
                err, exc, chk = _gradcheck_row(name, cfg, derive_seed(cfg["seed"], k, d))
                worst, excluded, checked = max(worst, err), excluded + exc, checked + chk
        status = "PASS" if worst < g["tolerance"] else "FAIL"
        rows.append({"effect": name, "draws": g["draws"], "checked": checked,
                     "excluded_nonsmooth": excluded, "max_rel_error": float(worst),
                     "status": status})
        print(f"{name:12s} {status}  max rel err {worst:.2e}  excluded {excluded}")
    report = _report(cfg, "gradcheck", {"rows": rows,
                                        "all_pass": all(r["status"] == "PASS" for r in rows)})
    out = _out(cfg)
    _write(out / "gradcheck_report.json", _canonical(report))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["effect"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(out / "gradcheck_report.csv", buf.getvalue())
    return report


def cmd_proxy_train(cfg) -> dict:
    p = cfg["proxy"]
    songs = _songs_by_split(cfg)
    load = lambda s: s[1] if isinstance(s, tuple) else _read_mono(s)  # noqa: E731
    train = [load(s) for s in songs["train"]]
    test = [load(s) for s in songs["test"]]
    specs = _chain(cfg, "chain_s", "comp").specs
    model_cfg = ProxyConfig(p["channels"], p["layers"], p["kernel"], p["dilation_growth"],
                            p["cond_width"])
    train_cfg = ProxyTrainConfig(p["steps"], p["batch_size"], p["segment"], p["learning_rate"],
                                 cfg["seed"])
    examples = make_examples(test, specs, p["test_examples"], p["segment"],
                             derive_seed(cfg["seed"], 77))
    torch.manual_seed(cfg["seed"])
    untrained = proxy_mae(ProxyModel(model_cfg, specs), examples)
    model = proxy_train(train, specs, train_cfg, model_cfg)
    trained = proxy_mae(model, examples)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_proxy(out / "proxy.npz", model)
    report = _report(cfg, "proxy-train", {
        "test_mae": trained, "untrained_mae": untrained,
        "receptive_field_samples": model_cfg.receptive_field,
        "reference_full_scale": {"test_mae": REFERENCE_FULL_SCALE["proxy_test_mae"]},
    })
    _write(out / "proxy_report.json", _canonical(report))
    print(f"proxy MAE {trained:.4f} (untrained {untrained:.4f})")
    return report


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--corpus", help="directory of WAV songs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.max_epochs=5")
    parser = argparse.ArgumentParser(prog="fxchain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "eval", "gradcheck", "proxy-train"):
        sub.add_parser(name, parents=[common])
    fit = sub.add_parser("fit", parents=[common])
    fit.add_argument("x", help="dry WAV")
    fit.add_argument("y", help="processed WAV")
    return parser


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FXCHAIN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out,
                                        "corpus": args.corpus}, args.set)
        if cfg["corpus"] is not None and not Path(cfg["corpus"]).is_dir():
            raise FileNotFoundError(f"corpus directory {cfg['corpus']} does not exist")
        commands = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                    "gradcheck": cmd_gradcheck, "proxy-train": cmd_proxy_train}
        if args.command == "fit":
            cmd_fit(cfg, args.x, args.y)
        else:
            commands[args.command](cfg)
    except (NonFiniteLoss, FloatingPointError) as err:
        print(f"error: non-finite value: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, CorruptHeader, UnsupportedFormat, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, LengthMismatch, MismatchedLength, OutOfRange, EmptyDataset, EmptyCorpus,
            SilentSignal, TooShort, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
