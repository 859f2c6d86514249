"""WAV I/O, clip extraction, synthetic corpora and dataset synthesis.

Records are reproducible from their provenance: source path and offset of the
clip, the record seed, the chain id and the parameter-range table.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .chain import EffectChain
from .params import ParamVector, denormalize
from .audio import DEFAULT_SR, AudioBuffer, mono_downmix, peak_normalize

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SYNTHETIC_PREFIX = "synthetic:"
_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


class UnsupportedFormat(ValueError):
    pass


class CorruptHeader(ValueError):
    pass


class SongTooShort(ValueError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from (master seed, index, ...) independent of call order."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --- WAV ---------------------------------------------------------------------

def load_wav(path) -> list[AudioBuffer]:
    """Read PCM 16/24-bit or 32-bit float little-endian WAV; one buffer per channel."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos:pos + 4], struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise CorruptHeader(f"{path}: chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise CorruptHeader(f"{path}: fmt chunk too small")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise CorruptHeader(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block, bits = fmt
    if channels < 1 or block != channels * bits // 8:
        raise CorruptHeader(f"{path}: inconsistent block alignment")
    if len(payload) % block:
        raise CorruptHeader(f"{path}: data chunk is not a whole number of frames")
    if tag == _FLOAT and bits == 32:
        samples = np.frombuffer(payload, "<f4").astype(np.float64)
    elif tag == _PCM and bits == 16:
        samples = np.frombuffer(payload, "<i2") / 2.0 ** 15
    elif tag == _PCM and bits == 24:
        raw = np.frombuffer(payload, np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        samples = ints / 2.0 ** 23
    else:
        raise UnsupportedFormat(f"{path}: format tag {tag} with {bits} bits")
    frames = samples.reshape(-1, channels)
    if frames.shape[0] == 0:
        raise CorruptHeader(f"{path}: no audio frames")
    return [AudioBuffer(frames[:, c], rate) for c in range(channels)]


def save_wav(path, audio: AudioBuffer | Sequence[AudioBuffer], fmt: str = "float32"):
    chans = [audio] if isinstance(audio, AudioBuffer) else list(audio)
    frames = np.stack([c.samples for c in chans], axis=1)
    rate = chans[0].sample_rate
    if fmt == "float32":
        tag, bits, payload = _FLOAT, 32, frames.astype("<f4").tobytes()
    elif fmt == "pcm16":
        ints = np.clip(np.round(frames * 2 ** 15), -2 ** 15, 2 ** 15 - 1)
        tag, bits, payload = _PCM, 16, ints.astype("<i2").tobytes()
    else:
        raise UnsupportedFormat(f"cannot write {fmt!r}")
    n_ch = frames.shape[1]
    block = n_ch * bits // 8
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         tag, n_ch, rate, rate * block, block, bits, b"data", len(payload))
    Path(path).write_bytes(header + payload)


# --- synthetic music-like corpus --------------------------------------------

def synth_song(seed: int, duration: float, sample_rate: int = DEFAULT_SR) -> AudioBuffer:
    """A deterministic mixture of bass, chords, kick and noise percussion with AM."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    bpm = rng.uniform(80, 150)
    beat = 60.0 / bpm
    out = np.zeros(n)

    root = 55.0 * 2 ** (rng.integers(0, 12) / 12)
    beat_idx = np.floor(t / beat).astype(int)
    steps = rng.integers(0, 8, size=beat_idx.max() + 1)
    bass_f = root * 2 ** (np.array([0, 3, 5, 7, 10, 12, 7, 5])[steps[beat_idx]] / 12)
    phase = 2 * np.pi * np.cumsum(bass_f) / sample_rate
    bass = sum(np.sin(k * phase) / k for k in range(1, 5))
    out += rng.uniform(0.3, 0.8) * bass * np.exp(-(t % beat) * rng.uniform(2, 8))

    for _ in range(rng.integers(2, 5)):
        f = root * 4 * 2 ** (rng.integers(0, 24) / 12)
        brightness = rng.uniform(0.3, 0.9)
        tone = sum(brightness ** k * np.sin(2 * np.pi * f * (k + 1) * t + rng.uniform(0, 2 * np.pi))
                   for k in range(6))
        am = 1 + rng.uniform(0, 0.8) * np.sin(2 * np.pi * rng.uniform(0.1, 6) * t)
        out += rng.uniform(0.05, 0.3) * tone * am

    tb = t % beat
    kick = np.sin(2 * np.pi * (50 + 100 * np.exp(-tb * 30)) * tb) * np.exp(-tb * 12)
    out += rng.uniform(0.2, 1.0) * kick
    half = (t + beat / 2) % beat
    noise = rng.normal(size=n)
    hat = np.diff(noise, prepend=0.0) * np.exp(-half * rng.uniform(20, 80))
    out += rng.uniform(0.05, 0.4) * hat
    return peak_normalize(AudioBuffer(out, sample_rate))


def write_synthetic_corpus(root, n_songs: int, duration: float, seed: int = 0,
                           sample_rate: int = DEFAULT_SR, n_test: int = 0) -> Path:
    """Write ``n_songs`` WAV songs; with ``n_test`` the last ones go under ``test/`` (MUSDB layout)."""
    root = Path(root)
    for i in range(n_songs):
        sub = root
        if n_test:
            sub = root / ("test" if i >= n_songs - n_test else "train")
        sub.mkdir(parents=True, exist_ok=True)
        save_wav(sub / f"song{i:03d}.wav", synth_song(derive_seed(seed, i), duration, sample_rate))
    return root


# --- clips and splits ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Clip:
    audio: AudioBuffer
    source: str
    offset: int


@dataclass
class SplitManifest:
    train: list[str]
    validation: list[str]
    test: list[str]
    clips_per_song: int
    seed: int

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test,
                "clips_per_song": self.clips_per_song, "seed": self.seed}


def list_songs(corpus_dir) -> list[Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    return sorted(p for p in root.rglob("*.wav") if p.is_file())


def make_split(corpus_dir, clips_per_song: int = 5, seed: int = 0) -> SplitManifest:
    """MUSDB layout (train/ + test/): 14% of train songs validate; otherwise a seeded 70/15/15 split."""
    root = Path(corpus_dir)
    songs = [str(p) for p in list_songs(root)]
    rng = np.random.default_rng(derive_seed(seed, 0x5EED))
    if (root / "train").is_dir() and (root / "test").is_dir():
        train = [s for s in songs if Path(s).parent == root / "train"]
        test = [s for s in songs if Path(s).parent == root / "test"]
        n_val = int(round(0.14 * len(train)))
    else:
        order = list(rng.permutation(len(songs)))
        n_test = int(round(0.15 * len(songs)))
        test = sorted(songs[i] for i in order[:n_test])
        train = sorted(songs[i] for i in order[n_test:])
        n_val = int(round(0.15 * len(train)))
    perm = rng.permutation(len(train))
    val = sorted(train[i] for i in perm[:n_val])
    train = sorted(train[i] for i in perm[n_val:])
    return SplitManifest(train, val, test, clips_per_song, seed)


def clip_offsets(n_samples: int, clip_len: int, per_song: int, seed: int) -> list[int]:
    if n_samples < clip_len:
        raise SongTooShort(f"song of {n_samples} samples is shorter than {clip_len}")
    rng = np.random.default_rng(seed)
    return [int(o) for o in rng.integers(0, n_samples - clip_len + 1, size=per_song)]


def extract_clips(songs, duration: float, per_song: int, seed: int = 0) -> list[Clip]:
    """Random mono, peak-normalized clips. ``songs`` is a directory or a list of paths/buffers.

    Songs shorter than ``duration`` are skipped with a warning.
    """
    if isinstance(songs, (str, Path)):
        songs = list_songs(songs)
    clips, skipped = [], 0
    for i, song in enumerate(songs):
        if isinstance(song, AudioBuffer):
            audio, source = song, f"buffer:{i}"
        elif isinstance(song, tuple):
            source, audio = song
        else:
            audio, source = mono_downmix(load_wav(song)), str(song)
        clip_len = int(round(duration * audio.sample_rate))
        try:
            offsets = clip_offsets(len(audio), clip_len, per_song, derive_seed(seed, i))
        except SongTooShort:
            skipped += 1
            continue
        for off in offsets:
            seg = audio.with_samples(audio.samples[off:off + clip_len])
            clips.append(Clip(peak_normalize(seg), source, off))
    if skipped:
        log.warning("skipped %d songs shorter than %.2f s", skipped, duration)
    return clips


def synthetic_songs(n_songs: int, duration: float, seed: int = 0,
                    sample_rate: int = DEFAULT_SR) -> list[tuple[str, AudioBuffer]]:
    """In-memory corpus; sources look like ``synthetic:<seed>:<index>:<duration>``."""
    return [(f"{SYNTHETIC_PREFIX}{seed}:{i}:{duration}",
             synth_song(derive_seed(seed, i), duration, sample_rate)) for i in range(n_songs)]


def resolve_source(source: str, sample_rate: int = DEFAULT_SR) -> AudioBuffer:
    if source.startswith(SYNTHETIC_PREFIX):
        seed, i, duration = source[len(SYNTHETIC_PREFIX):].split(":")
        return synth_song(derive_seed(int(seed), int(i)), float(duration), sample_rate)
    return mono_downmix(load_wav(source))


# --- dataset records -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetRecord:
    x: AudioBuffer
    y: AudioBuffer
    q: ParamVector
    p: ParamVector
    chain_id: str
    seed: int
    source: str = ""
    offset: int = 0


def draw_q(n_params: int, seed: int) -> ParamVector:
    return ParamVector(np.random.default_rng(seed).uniform(0.0, 1.0, n_params))


def synthesize_record(clip: Clip | AudioBuffer, chain: EffectChain, seed: int) -> DatasetRecord:
    x = clip.audio if isinstance(clip, Clip) else clip
    q = draw_q(chain.n_params, seed)
    y = chain.render(peak_normalize(x), q)
    return DatasetRecord(peak_normalize(x), y, q, denormalize(q, chain.specs), chain.chain_id,
                         seed, getattr(clip, "source", ""), getattr(clip, "offset", 0))


def synthesize_dataset(clips: Sequence[Clip | AudioBuffer], chain: EffectChain,
                       seed: int = 0) -> list[DatasetRecord]:
    """One record per clip, each with an independent q ~ U(0,1)^C from its own derived seed."""
    return [synthesize_record(c, chain, derive_seed(seed, i)) for i, c in enumerate(clips)]


def manifest_dict(records: Sequence[DatasetRecord], chain: EffectChain, duration: float,
                  extra: dict | None = None) -> dict:
    sr = records[0].x.sample_rate if records else chain.sample_rate
    out = {
        "version": MANIFEST_VERSION,
        "sample_rate": sr,
        "duration_s": duration,
        "chain_id": chain.chain_id,
        "range_table_hash": chain.range_hash(),
        "records": [
            {"source": r.source, "offset": r.offset, "seed": r.seed,
             "q": [float(v) for v in r.q.values]}
            for r in records
        ],
    }
    if extra:
        out.update(extra)
    return out


def write_manifest(path, manifest: dict) -> str:
    """Write canonical JSON and return its sha256."""
    blob = json.dumps(manifest, indent=2, sort_keys=True).encode()
    Path(path).write_bytes(blob + b"\n")
    return hashlib.sha256(blob).hexdigest()


def load_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CorruptHeader(f"{path}: invalid manifest JSON") from err
    missing = {"version", "sample_rate", "duration_s", "chain_id", "range_table_hash",
               "records"} - set(m)
    if missing:
        raise CorruptHeader(f"{path}: manifest lacks {sorted(missing)}")
    if m["version"] != MANIFEST_VERSION:
        raise UnsupportedFormat(f"manifest version {m['version']}")
    return m


def rebuild_records(manifest: dict, chain: EffectChain) -> list[DatasetRecord]:
    """Re-render every record from provenance alone."""
    if chain.chain_id != manifest["chain_id"]:
        raise ValueError(f"manifest was made with chain {manifest['chain_id']!r}")
    if chain.range_hash() != manifest["range_table_hash"]:
        raise ValueError("parameter-range table differs from the manifest")
    sr = manifest["sample_rate"]
    clip_len = int(round(manifest["duration_s"] * sr))
    cache: dict[str, AudioBuffer] = {}
    out = []
    for rec in manifest["records"]:
        song = cache.get(rec["source"])
        if song is None:
            song = cache[rec["source"]] = resolve_source(rec["source"], sr)
        seg = song.with_samples(song.samples[rec["offset"]:rec["offset"] + clip_len])
        clip = Clip(peak_normalize(seg), rec["source"], rec["offset"])
        r = synthesize_record(clip, chain, rec["seed"])
        if not np.allclose(r.q.values, rec["q"], rtol=0, atol=1e-15):
            raise ValueError("stored q does not match its seed")
        out.append(r)
    return out
