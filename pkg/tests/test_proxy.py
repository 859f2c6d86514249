import numpy as np
import pytest
import torch

from fxchain import checkpoint
from fxchain.audio import AudioBuffer, gen_test_signal, peak_normalize
from fxchain.chain import EffectChain
from fxchain.checkpoint import CheckpointError
from fxchain.effects.dynamics import CompressorParams, compress
from fxchain.params import ParamVector, denormalize, normalize
from fxchain.proxy import (EmptyCorpus, ProxyCompressor, ProxyConfig, ProxyModel,
                           ProxyTrainConfig, hybrid_render, load_proxy,
                           proxy_forward, proxy_train, save_proxy, toy_corpus,
                           toy_specs)

SR = 44100
SMALL = ProxyConfig(channels=4, layers=3, kernel=3, dilation_growth=2, cond_width=8)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return ProxyModel(ProxyConfig(), toy_specs())


def test_default_receptive_field_covers_quarter_second():
    assert ProxyConfig().receptive_field / SR >= 0.25


def test_gain_in_unit_interval_and_attenuates(model, rng):
    x = torch.tensor(rng.uniform(-1, 1, (3, 4000)), dtype=torch.float32)
    q = torch.tensor(rng.uniform(0, 1, (3, 5)), dtype=torch.float32)
    with torch.no_grad():
        g = model.gain(x, q)
        y = model(x, q)
    assert torch.all(g > 0) and torch.all(g < 1)
    assert torch.all(y.abs() <= x.abs())


def test_zero_input_gives_zero_output(model):
    y = proxy_forward(model, AudioBuffer(np.zeros(2000), SR), ParamVector([0.5] * 5))
    assert np.all(y.samples == 0.0)


def test_causality_probe(model, rng):
    x = rng.uniform(-1, 1, 6000)
    x2 = x.copy()
    x2[3000:] = rng.uniform(-1, 1, 3000)
    q = ParamVector(rng.uniform(0, 1, 5))
    a = proxy_forward(model, AudioBuffer(x, SR), q).samples
    b = proxy_forward(model, AudioBuffer(x2, SR), q).samples
    assert np.array_equal(a[:3000], b[:3000])
    assert not np.array_equal(a[3000:], b[3000:])


def test_gradients_wrt_signal_and_parameters(rng):
    torch.manual_seed(1)
    m = ProxyModel(SMALL).double()
    x = torch.tensor(rng.uniform(-1, 1, (1, 64)), requires_grad=True)
    q = torch.tensor(rng.uniform(0.2, 0.8, (1, 5)), requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: m(a, b).sum(), (x, q), eps=1e-6, atol=1e-6)


def test_hybrid_render_is_dsp_compressor(noise):
    q = ParamVector([0.4, 0.6, 0.3, 0.5, 0.2])
    specs = toy_specs()
    ref = compress(noise, CompressorParams(*denormalize(q, specs).values), SR)
    out = hybrid_render(noise, q, specs)
    assert np.array_equal(out.samples, ref.samples)


def test_hybrid_ratio_one_is_identity(noise):
    specs = toy_specs()
    q = normalize(ParamVector([-25.0, 1.0, 5.0, 50.0, 3.0], "denormalized"), specs)
    out = hybrid_render(noise, q, specs)
    assert np.max(np.abs(out.samples - noise.samples)) < 1e-9


def test_hybrid_chain_renders_with_dsp(model, noise):
    effect = ProxyCompressor(SR, model=model, hybrid=True)
    chain = EffectChain([effect])
    q = ParamVector([0.3, 0.7, 0.5, 0.5, 0.5])
    x = peak_normalize(noise)
    ref = peak_normalize(hybrid_render(x, q, effect.specs))
    assert np.allclose(chain.render(noise, q).samples, ref.samples, atol=1e-12)
    assert effect.name == "comp_hybrid"


def test_proxy_effect_is_differentiable(model):
    effect = ProxyCompressor(SR, model=model)
    x = torch.tensor(gen_test_signal("white-noise", 0.05, seed=1).samples)
    q = torch.full((5,), 0.5, dtype=torch.float64, requires_grad=True)
    effect(x, q).abs().sum().backward()
    assert q.grad is not None and torch.all(torch.isfinite(q.grad))
    assert all(p.grad is None for p in model.parameters())


def test_checkpoint_roundtrip_and_kind(model, tmp_path, rng):
    save_proxy(tmp_path / "p.npz", model)
    back = load_proxy(tmp_path / "p.npz")
    x = AudioBuffer(rng.uniform(-1, 1, 3000), SR)
    q = ParamVector(rng.uniform(0, 1, 5))
    assert np.array_equal(proxy_forward(model, x, q).samples, proxy_forward(back, x, q).samples)
    assert [s.to_dict() for s in back.specs] == [s.to_dict() for s in toy_specs()]
    checkpoint.save(tmp_path / "o.npz", model, {"kind": "analysis"})
    with pytest.raises(CheckpointError):
        load_proxy(tmp_path / "o.npz")


def test_proxy_effect_requires_model():
    with pytest.raises(ValueError):
        ProxyCompressor(SR)


def test_empty_corpus_rejected():
    with pytest.raises(EmptyCorpus):
        proxy_train([], toy_specs())


def test_toy_corpus_is_deterministic_and_normalized():
    a, b = toy_corpus(4, 0.5, seed=3), toy_corpus(4, 0.5, seed=3)
    for u, v in zip(a, b):
        assert np.array_equal(u.samples, v.samples)
        assert u.peak == pytest.approx(1.0)


def test_training_is_deterministic():
    corpus = toy_corpus(4, 0.5, seed=0)
    cfg = ProxyTrainConfig(steps=15, batch_size=2, segment=0.05)
    a = proxy_train(corpus, toy_specs(), cfg, SMALL)
    b = proxy_train(corpus, toy_specs(), cfg, SMALL)
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])
    with pytest.raises(ValueError):
        proxy_train(corpus, toy_specs(), ProxyTrainConfig(segment=1.0), SMALL)
