import csv
import json
import subprocess
import sys

import pytest
import yaml

from fxchain.audio import AudioBuffer, gen_test_signal
from fxchain.chain import EffectChain
from fxchain.cli import CSV_COLUMNS, DEFAULT_CONFIG, ConfigError, load_config, run
from fxchain.data import save_wav, write_synthetic_corpus
from fxchain.params import ParamVector

TINY = {
    "synthetic": {"n_songs": 6, "song_duration": 1.0},
    "chain_s": "clip",
    "chain_a": "clip",
    "clips": {"duration": 0.25, "per_song": 2},
    "train": {"learning_rate": 1e-3, "batch_size": 4, "max_epochs": 2, "epoch_size": 8,
              "patience_lr": 1, "patience_stop": 2, "q_draws": 2},
    "eval": {"runs": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def _run(config, out, *extra):
    return run([extra[0], "--config", str(config), "--out", str(out), *extra[1:]])


def test_config_defaults_and_overrides(config):
    cfg = load_config(config, {"seed": 5}, ["train.max_epochs=3", "eval.runs=4"])
    assert cfg["seed"] == 5 and cfg["train"]["max_epochs"] == 3 and cfg["eval"]["runs"] == 4
    assert cfg["mel"] == DEFAULT_CONFIG["mel"]
    with pytest.raises(ConfigError):
        load_config(None, sets=["train.nope=1"])
    with pytest.raises(ConfigError):
        load_config(None, sets=["chain_s=peq>nope"])
    with pytest.raises(ConfigError):
        load_config(None, sets=["train.objective=mse"])


def test_exit_codes(tmp_path, config):
    assert run(["nope"]) == 2
    assert run(["synth", "--config", str(tmp_path / "missing.yaml")]) == 3
    (tmp_path / "bad.yaml").write_text("train: [1, 2\n")
    assert run(["synth", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert _run(config, tmp_path / "o", "synth", "--set", "clips.duration=-1") == 2
    assert _run(config, tmp_path / "o", "synth", "--corpus", str(tmp_path / "absent")) == 3
    assert _run(config, tmp_path / "o", "eval", "--set", "eval.checkpoint=" +
                str(tmp_path / "none.npz")) == 3


def test_synth_record_count_and_rerun_hash(tmp_path, config):
    assert _run(config, tmp_path / "a", "synth") == 0
    assert _run(config, tmp_path / "b", "synth") == 0
    rep = json.loads((tmp_path / "a" / "synth_report.json").read_text())
    assert sum(s["records"] for s in rep["splits"].values()) == 12
    for name in ("train", "validation", "test"):
        a = (tmp_path / "a" / f"manifest_{name}.json").read_bytes()
        assert a == (tmp_path / "b" / f"manifest_{name}.json").read_bytes()
    assert _run(config, tmp_path / "c", "synth", "--seed", "1") == 0
    assert (tmp_path / "c" / "manifest_train.json").read_bytes() != \
        (tmp_path / "a" / "manifest_train.json").read_bytes()


def test_synth_from_wav_corpus(tmp_path, config):
    write_synthetic_corpus(tmp_path / "songs", n_songs=5, duration=0.5, seed=0)
    assert _run(config, tmp_path / "o", "synth", "--corpus", str(tmp_path / "songs")) == 0
    rep = json.loads((tmp_path / "o" / "synth_report.json").read_text())
    assert sum(s["records"] for s in rep["splits"].values()) == 10


def test_fit_command(tmp_path, config):
    x = gen_test_signal("white-noise", 0.25, seed=4)
    y = EffectChain.from_id("clip").render(x, ParamVector([0.6, 0.5, 0.4]))
    save_wav(tmp_path / "x.wav", x)
    save_wav(tmp_path / "y.wav", y)
    code = _run(config, tmp_path / "o", "fit", str(tmp_path / "x.wav"), str(tmp_path / "y.wav"),
                "--set", "fit.steps=300")
    assert code == 0
    rep = json.loads((tmp_path / "o" / "fit_report.json").read_text())
    assert rep["final_loss"] < 0.1 and set(rep["p_hat"]) == {"gain", "offset", "hardness"}
    save_wav(tmp_path / "short.wav", AudioBuffer(x.samples[:-10]))
    assert _run(config, tmp_path / "o", "fit", str(tmp_path / "x.wav"),
                str(tmp_path / "short.wav")) == 2


def test_train_eval_csv_and_determinism(tmp_path, config):
    for out in ("a", "b"):
        assert _run(config, tmp_path / out, "train") == 0
        assert _run(config, tmp_path / out, "eval") == 0
    for name in ("train_report.json", "eval_report.json", "eval_report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader((tmp_path / "a" / "eval_report.csv").open()))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["implementation"] for r in rows] == ["clip", "Random q", "L(x, y)"]
    assert all(r["runs"] == "2" for r in rows)


def test_random_network_is_near_random_baseline(tmp_path, config):
    assert _run(config, tmp_path, "eval", "--set", "eval.network=random",
                "--set", "eval.runs=5", "--set", "synthetic.n_songs=12") == 0
    rep = json.loads((tmp_path / "eval_report.json").read_text())
    est, rnd = rep["metrics"]["estimate"]["lyy"], rep["metrics"]["random_q"]["lyy"]
    assert abs(est - rnd) / rnd < 0.2


def test_gradcheck_pass_and_corrupt(tmp_path, config):
    sets = ["--set", "gradcheck.draws=2", "--set", "gradcheck.effects=[clip, comp_simple, mel_l1]"]
    assert _run(config, tmp_path / "ok", "gradcheck", *sets) == 0
    rep = json.loads((tmp_path / "ok" / "gradcheck_report.json").read_text())
    assert rep["all_pass"] and [r["effect"] for r in rep["rows"]] == ["clip", "comp_simple",
                                                                       "mel_l1"]
    assert all("excluded_nonsmooth" in r and r["checked"] > 0 for r in rep["rows"])
    assert _run(config, tmp_path / "bad", "gradcheck", *sets,
                "--set", "gradcheck.corrupt_backward=1.5") == 0
    rows = {r["effect"]: r for r in
            csv.DictReader((tmp_path / "bad" / "gradcheck_report.csv").open())}
    assert rows["comp_simple"]["status"] == "FAIL"


def test_module_entry_point(tmp_path, config):
    proc = subprocess.run([sys.executable, "-m", "fxchain.cli", "synth", "--config", str(config),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "records" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "fxchain.cli", "synth", "--set", "seed=-1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "seed" in proc.stderr
