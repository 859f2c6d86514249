import json
import struct

import numpy as np
import pytest
from scipy import stats

from fxchain.audio import AudioBuffer, peak_normalize
from fxchain.chain import EffectChain
from fxchain.data import (CorruptHeader, SongTooShort, UnsupportedFormat, clip_offsets,
                          derive_seed, draw_q, extract_clips, load_manifest, load_wav,
                          make_split, manifest_dict, rebuild_records, save_wav,
                          synth_song, synthesize_dataset, synthetic_songs,
                          write_manifest, write_synthetic_corpus)
from fxchain.params import ParamVector, normalize


def _pcm16_file(path, ints, rate=44100):
    payload = np.asarray(ints, dtype="<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         1, 1, rate, rate * 2, 2, 16, b"data", len(payload))
    path.write_bytes(header + payload)


def test_pcm16_full_scale_negative(tmp_path):
    _pcm16_file(tmp_path / "a.wav", [-32768, 0, 16384])
    (buf,) = load_wav(tmp_path / "a.wav")
    assert buf.samples.tolist() == [-1.0, 0.0, 0.5]


def test_pcm24_scaling(tmp_path):
    vals = np.array([-(1 << 23), 1 << 22, 0], dtype=np.int64)
    raw = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in vals)
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(raw), b"WAVE", b"fmt ", 16,
                         1, 1, 8000, 8000 * 3, 3, 24, b"data", len(raw))
    (tmp_path / "b.wav").write_bytes(header + raw)
    (buf,) = load_wav(tmp_path / "b.wav")
    assert buf.samples.tolist() == [-1.0, 0.5, 0.0]


def test_float32_roundtrip_is_bit_exact(tmp_path, rng):
    x = rng.uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    left, right = AudioBuffer(x, 22050), AudioBuffer(-x, 22050)
    save_wav(tmp_path / "c.wav", [left, right])
    back = load_wav(tmp_path / "c.wav")
    assert len(back) == 2 and back[0].sample_rate == 22050
    assert np.array_equal(back[0].samples, x) and np.array_equal(back[1].samples, -x)


def test_truncated_file_is_corrupt(tmp_path):
    save_wav(tmp_path / "d.wav", AudioBuffer(np.zeros(100) + 0.1, 44100))
    blob = (tmp_path / "d.wav").read_bytes()
    (tmp_path / "e.wav").write_bytes(blob[:-37])
    with pytest.raises(CorruptHeader):
        load_wav(tmp_path / "e.wav")
    (tmp_path / "f.wav").write_bytes(blob[:10])
    with pytest.raises(CorruptHeader):
        load_wav(tmp_path / "f.wav")


def test_unsupported_bit_depth(tmp_path):
    payload = bytes(8)
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         1, 1, 8000, 8000, 1, 8, b"data", len(payload))
    (tmp_path / "g.wav").write_bytes(header + payload)
    with pytest.raises(UnsupportedFormat):
        load_wav(tmp_path / "g.wav")


def test_430_clips_from_86_songs():
    songs = [(f"s{i}", AudioBuffer(np.sin(np.arange(300) * 0.1 + i), 100)) for i in range(86)]
    clips = extract_clips(songs, duration=1.0, per_song=5, seed=3)
    assert len(clips) == 430
    assert all(len(c.audio) == 100 for c in clips)


def test_clip_offsets_deterministic_and_in_range():
    a = clip_offsets(10_000, 441, 5, seed=11)
    assert a == clip_offsets(10_000, 441, 5, seed=11)
    assert a != clip_offsets(10_000, 441, 5, seed=12)
    assert all(0 <= o <= 10_000 - 441 for o in a)
    with pytest.raises(SongTooShort):
        clip_offsets(100, 441, 1, seed=0)


def test_short_songs_skipped_with_warning(caplog):
    songs = [("long", AudioBuffer(np.ones(500) * 0.3, 100)), ("short", AudioBuffer(np.ones(50) * 0.3, 100))]
    with caplog.at_level("WARNING"):
        clips = extract_clips(songs, duration=1.0, per_song=2, seed=0)
    assert len(clips) == 2 and {c.source for c in clips} == {"long"}
    assert "skipped 1" in caplog.text


def test_clips_from_wav_directory_are_mono_and_exact_length(tmp_path):
    write_synthetic_corpus(tmp_path, n_songs=3, duration=1.0, seed=1)
    clips = extract_clips(tmp_path, duration=0.25, per_song=2, seed=0)
    assert len(clips) == 6
    for c in clips:
        assert len(c.audio) == int(round(0.25 * 44100))
        assert c.audio.peak == pytest.approx(1.0, abs=1e-12)


def test_split_disjoint_flat_and_musdb_layout(tmp_path):
    write_synthetic_corpus(tmp_path / "flat", n_songs=20, duration=0.1, seed=0)
    split = make_split(tmp_path / "flat", seed=4)
    sets = [set(split.train), set(split.validation), set(split.test)]
    assert sum(map(len, sets)) == 20
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert split.to_dict() == make_split(tmp_path / "flat", seed=4).to_dict()

    write_synthetic_corpus(tmp_path / "mus", n_songs=12, duration=0.1, seed=0, n_test=5)
    split = make_split(tmp_path / "mus", seed=0)
    assert len(split.test) == 5 and all("/test/" in s for s in split.test)
    assert len(split.train) + len(split.validation) == 7 and len(split.validation) == 1


def test_uniform_q_draws_ks():
    draws = np.stack([draw_q(3, derive_seed(7, i)).values for i in range(10_000)])
    for c in range(3):
        assert stats.kstest(draws[:, c], "uniform").pvalue > 0.01


def test_identity_chain_passes_peak_normalized_input():
    chain = EffectChain.from_id("peq>comp>taylor")
    x = synth_song(5, 0.5)
    p = np.zeros(chain.n_params)
    specs = chain.specs
    for i, s in enumerate(specs):
        if s.name.endswith("freq"):
            p[i] = np.sqrt(s.min * s.max)
        elif s.name.endswith("_q"):
            p[i] = 1.0
        elif s.name == "ratio":
            p[i] = 1.0
        elif s.name in ("attack", "release"):
            p[i] = 10.0
        elif s.name == "g1":
            p[i] = 1.0
    q = normalize(ParamVector(p, "denormalized"), specs)
    y = chain.render(x, q)
    assert np.max(np.abs(y.samples - peak_normalize(x).samples)) < 1e-6


def test_records_reproducible_and_peak_normalized(tmp_path):
    chain = EffectChain.from_id("clip")
    clips = extract_clips(synthetic_songs(3, 0.5, seed=2), duration=0.2, per_song=2, seed=1)
    recs = synthesize_dataset(clips, chain, seed=9)
    again = synthesize_dataset(clips, chain, seed=9)
    for a, b in zip(recs, again):
        assert np.array_equal(a.y.samples, b.y.samples)
        assert a.x.peak == pytest.approx(1.0, abs=1e-6) and a.y.peak == pytest.approx(1.0, abs=1e-6)
    assert len({tuple(r.q.values) for r in recs}) == len(recs)

    m = manifest_dict(recs, chain, duration=0.2)
    digest = write_manifest(tmp_path / "m.json", m)
    assert digest == write_manifest(tmp_path / "m2.json", m)
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert "samples" not in (tmp_path / "m.json").read_text()
    rebuilt = rebuild_records(load_manifest(tmp_path / "m.json"), chain)
    for a, b in zip(recs, rebuilt):
        assert np.array_equal(a.x.samples, b.x.samples)
        assert np.array_equal(a.y.samples, b.y.samples)


def test_manifest_rejects_mismatched_chain_and_bad_json(tmp_path):
    chain = EffectChain.from_id("clip")
    recs = synthesize_dataset(extract_clips(synthetic_songs(1, 0.3), 0.1, 1), chain)
    write_manifest(tmp_path / "m.json", manifest_dict(recs, chain, 0.1))
    m = load_manifest(tmp_path / "m.json")
    with pytest.raises(ValueError):
        rebuild_records(m, EffectChain.from_id("taylor"))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CorruptHeader):
        load_manifest(tmp_path / "bad.json")
    (tmp_path / "old.json").write_text(json.dumps({**m, "version": 99}))
    with pytest.raises(UnsupportedFormat):
        load_manifest(tmp_path / "old.json")
