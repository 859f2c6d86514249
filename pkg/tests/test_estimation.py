import math

import numpy as np
import pytest
import torch

from fxchain.audio import AudioBuffer, gen_test_signal
from fxchain.chain import EffectChain
from fxchain.checkpoint import CheckpointError
from fxchain.data import derive_seed, draw_q, extract_clips, synthesize_dataset, synthetic_songs
from fxchain.estimation import (AnalysisNetwork, _Batches, _extra_draws, EmptyDataset, FitConfig, NonFiniteLoss,
                                TrainConfig, evaluate, fit_paired, load_checkpoint, predict,
                                save_checkpoint, train_blind)
from fxchain.losses import MelConfig
from fxchain.effects.base import Effect
from fxchain.params import LengthMismatch, ParamSpec, ParamVector

CFG = MelConfig()


@pytest.fixture(scope="module")
def clip_records():
    chain = EffectChain.from_id("clip")
    clips = extract_clips(synthetic_songs(8, 1.0, seed=5), duration=0.5, per_song=3, seed=2)
    return chain, clips, synthesize_dataset(clips, chain, seed=3)


def test_fit_clipper_reaches_target(short_noise):
    chain = EffectChain.from_id("clip")
    y = chain.render(short_noise, ParamVector([0.7, 0.5, 0.3]))
    r = fit_paired(short_noise, y, chain, CFG, FitConfig(steps=500, learning_rate=0.1))
    assert r.final_loss < 0.05
    assert r.final_loss == min(r.losses) and len(r.losses) == len(r.trajectory) <= 501


def test_fit_identity_eq(short_noise):
    chain = EffectChain.from_id("peq")
    r = fit_paired(short_noise, short_noise, chain, CFG, FitConfig(steps=300, learning_rate=0.05))
    assert r.final_loss < 0.05


def test_fit_started_at_target_stays(short_noise):
    chain = EffectChain.from_id("comp_simple")
    q = [0.6, 0.4, 0.5, 0.3]
    y = chain.render(short_noise, ParamVector(q))
    r = fit_paired(short_noise, y, chain, CFG, FitConfig(steps=5, init=q))
    assert r.losses[0] < 1e-6


def test_fit_restarts_are_counted_in_budget(short_noise):
    chain = EffectChain.from_id("taylor")
    y = chain.render(short_noise, ParamVector(np.linspace(0.2, 0.8, chain.n_params)))
    cfg = FitConfig(steps=120, learning_rate=0.1, restart=True, patience=10,
                    min_improvement=0.05, tolerance=0.0)
    r = fit_paired(short_noise, y, chain, CFG, cfg)
    assert r.restarts > 0 and len(r.losses) == 121
    again = fit_paired(short_noise, y, chain, CFG, cfg)
    assert again.losses == r.losses


def test_fit_errors(short_noise):
    chain = EffectChain.from_id("clip")
    with pytest.raises(LengthMismatch):
        fit_paired(short_noise, AudioBuffer(short_noise.samples[:-1]), chain, CFG)
    with pytest.raises(NonFiniteLoss) as err:
        fit_paired(short_noise, short_noise, EffectChain([_Blowup()]), CFG, FitConfig(steps=50))
    assert len(err.value.trajectory) == 1


class _Blowup(Effect):
    name = "blowup"

    def __init__(self):
        super().__init__([ParamSpec("g", 0.0, 1.0)], 44100)

    def __call__(self, x, q):
        return x * (q[0] - q[0]) / (q[0] - q[0])


def test_predict_range_determinism_and_length():
    torch.manual_seed(0)
    net = AnalysisNetwork(3, CFG, 22050)
    net.eval()
    y = gen_test_signal("white-noise", 0.5, seed=1)
    a, b = predict(net, y), predict(net, y)
    assert np.all((a.values > 0) & (a.values < 1)) and np.array_equal(a.values, b.values)
    with pytest.raises(LengthMismatch):
        predict(net, gen_test_signal("white-noise", 0.4, seed=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(patience_lr=10, patience_stop=5)
    with pytest.raises(ValueError):
        TrainConfig(objective="mse")


def test_training_is_deterministic_and_learns(clip_records):
    chain, _, recs = clip_records
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=6, epoch_size=32, seed=4)
    net, hist = train_blind(recs[:18], recs[18:], chain, CFG, cfg)
    net2, hist2 = train_blind(recs[:18], recs[18:], chain, CFG, cfg)
    assert hist.val_loss == hist2.val_loss
    for k, v in net.state_dict().items():
        assert torch.equal(v, net2.state_dict()[k])
    assert hist.best_val == min(hist.val_loss) and hist.train_loss[-1] < hist.train_loss[0]
    with pytest.raises(EmptyDataset):
        train_blind([], recs, chain, CFG, cfg)


def test_evaluate_oracle_and_random_baseline(clip_records):
    chain, clips, _ = clip_records
    res = evaluate(lambda rec: rec.q, clips, chain, chain, CFG, runs=2, seed=1)
    assert res["estimate"].lyy < 1e-9 and res["estimate"].mqq == 0.0
    assert abs(res["random_q"].mqq - 1 / 6) < 0.05
    assert res["dry_vs_wet"].lyy > 0 and math.isnan(res["dry_vs_wet"].mqq)
    assert res["estimate"].runs == 2
    with pytest.raises(EmptyDataset):
        evaluate(lambda rec: rec.q, [], chain, chain, CFG)


def test_checkpoint_roundtrip(tmp_path):
    chain = EffectChain.from_id("clip")
    torch.manual_seed(0)
    net = AnalysisNetwork(3, CFG, 22050)
    net.set_feature_stats(torch.randn(5, net.encoder.dim))
    save_checkpoint(tmp_path / "a.npz", net, chain, CFG)
    back, meta = load_checkpoint(tmp_path / "a.npz", chain)
    y = gen_test_signal("white-noise", 0.5, seed=2)
    assert np.array_equal(predict(net, y).values, predict(back, y).values)
    assert meta["chain_id"] == "clip"
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.npz", EffectChain.from_id("taylor"))
    narrow = EffectChain.from_id("clip", overrides={"clip": {"gain": {"min": 0.0, "max": 12.0}}})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.npz", narrow)


def test_extra_parameter_draws(clip_records):
    chain, _, recs = clip_records
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=2, epoch_size=16, q_draws=3)
    with pytest.raises(ValueError):
        train_blind(recs[:6], recs[6:9], chain, CFG, cfg)
    net = AnalysisNetwork(chain.n_params, CFG, len(recs[0].x))
    pool = _Batches(recs[:6], net, CFG, _extra_draws(recs[:6], chain, 3, seed=0))
    assert len(pool) == 18 and pool.clip.tolist() == list(range(6)) * 3
    q = draw_q(chain.n_params, derive_seed(0, 3, 1, 4))  # second draw of clip 4
    assert torch.equal(pool.q[6 + 4], torch.tensor(q.values).float())
    ref = net.embed(torch.tensor(chain.render(recs[4].x, q).samples)[None])[0]
    assert torch.allclose(pool.emb[6 + 4], ref, atol=1e-6)
    trained, hist = train_blind(recs[:6], recs[6:9], chain, CFG, cfg, synth_chain=chain)
    assert len(hist.val_loss) == 2
