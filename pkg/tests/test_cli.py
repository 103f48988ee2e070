import filecmp
import json
from pathlib import Path

import pytest

from rangeseq import config as cfgmod
from rangeseq.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, run
from rangeseq.model import TOY, count_params_flops

TOY_TOML = """
preset = "toy"
[train]
epochs = 1
phase_split = 1
steps_per_epoch = 2
progress_every = 0
[data.synthetic]
n_sequences = 5
"""


@pytest.fixture
def toy_config(tmp_path):
    p = tmp_path / "toy.toml"
    p.write_text(TOY_TOML)
    return str(p)


def dir_fingerprint(root: Path):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_defaults_follow_reference_protocol():
    cfg = cfgmod.load_config(environ={})
    assert (cfg["sensor"]["h"], cfg["sensor"]["w"]) == (64, 2048)
    assert (cfg["model"]["P"], cfg["model"]["F"]) == (5, 5)
    assert cfg["train"]["threshold"] == 0.5 and cfg["train"]["lr"] == 1e-3 and cfg["train"]["decay"] == 0.99


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(cfgmod.ConfigError, match="train.learning_rate"):
        cfgmod.load_config(str(p), environ={})
    with pytest.raises(cfgmod.ConfigError, match="bogus"):
        cfgmod.load_config(environ={"RANGESEQ_BOGUS": "1"})
    assert run(["info", "--config", str(p), "--out", str(tmp_path / "o")], environ={}) == EXIT_CONFIG


def test_type_and_value_errors_name_the_key(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="train.epochs"):
        cfgmod.load_config(environ={"RANGESEQ_TRAIN__EPOCHS": '"many"'})
    with pytest.raises(cfgmod.ConfigError, match="model"):
        cfgmod.load_config(environ={"RANGESEQ_PRESET": "toy", "RANGESEQ_MODEL__HEADS": "5"})


def test_env_overrides_and_snapshot(tmp_path):
    env = {"RANGESEQ_PRESET": "toy", "RANGESEQ_TRAIN__LR": "0.01", "RANGESEQ_MODEL__BRANCH": "H-only",
           "RANGESEQ_DATA__SYNTHETIC__N_BOXES": "1"}
    cfg = cfgmod.load_config(environ=env)
    assert cfg["train"]["lr"] == 0.01 and cfg["model"]["branch"] == "H-only"
    assert cfg["data"]["synthetic"]["n_boxes"] == 1
    path = cfgmod.write_snapshot(cfg, tmp_path)
    assert cfgmod.load_config(str(path), environ={}) == cfg


def test_info_matches_counter(toy_config, tmp_path, capsys):
    assert run(["info", "--config", toy_config, "--out", str(tmp_path)], environ={}) == EXIT_OK
    out = capsys.readouterr().out
    c = count_params_flops(TOY)
    assert f"params     {c.params}" in out and f"macs       {c.macs}" in out
    assert (tmp_path / "resolved_config.toml").exists()
    first = json.loads((tmp_path / "info.jsonl").read_text().splitlines()[0])
    assert first["params"] == c.params


def test_synth_is_deterministic(toy_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--config", toy_config, "--seed", "7", "--out", str(a)], environ={}) == EXIT_OK
    assert run(["synth", "--config", toy_config, "--seed", "7", "--out", str(b)], environ={}) == EXIT_OK
    files = dir_fingerprint(a)
    assert files == dir_fingerprint(b)
    data_files = [f for f in files if f != "resolved_config.toml"]
    match, mismatch, errors = filecmp.cmpfiles(a, b, data_files, shallow=False)
    assert not mismatch and not errors and len(match) == len(data_files)
    assert len(list((a / "sequences").iterdir())) == 5
    c = tmp_path / "c"
    run(["synth", "--config", toy_config, "--seed", "8", "--out", str(c)], environ={})
    assert not filecmp.cmp(a / "sequences/00/000003.bin", c / "sequences/00/000003.bin", shallow=False)


def test_pipeline_on_disk_dataset(toy_config, tmp_path, capsys):
    ds = tmp_path / "ds"
    run(["synth", "--config", toy_config, "--out", str(ds)], environ={})
    before = {f: (ds / f).read_bytes() for f in dir_fingerprint(ds)}
    env = {"RANGESEQ_DATA__DATASET": str(ds)}
    t = tmp_path / "t"
    assert run(["train", "--config", toy_config, "--out", str(t), "--threads", "1"], environ=env) == EXIT_OK
    assert (t / "trainlog.jsonl").exists() and (t / "loss_curves.png").stat().st_size > 0
    e = tmp_path / "e"
    ck = str(t / "checkpoints" / "last.rctf")
    assert run(["eval", "--config", toy_config, "--out", str(e), "--checkpoint", ck], environ=env) == EXIT_OK
    assert "Mean" in capsys.readouterr().out
    assert (e / "report.txt").exists() and (e / "step_chamfer.png").exists()
    p = tmp_path / "p"
    assert run(["predict", "--config", toy_config, "--out", str(p), "--checkpoint", ck], environ=env) == EXIT_OK
    assert len(list((p / "predictions").rglob("*.bin"))) == 5 * 3
    # no command touched the dataset
    assert {f: (ds / f).read_bytes() for f in dir_fingerprint(ds)} == before


def test_eval_fresh_model_loses_to_baseline(toy_config, tmp_path):
    assert run(["eval", "--config", toy_config, "--out", str(tmp_path)], environ={}) == EXIT_OK
    recs = [json.loads(l) for l in (tmp_path / "report.jsonl").read_text().splitlines()]
    mean = next(r for r in recs if r["step"] == "mean")
    assert mean["chamfer"] > mean["baseline_chamfer"]


def test_error_exit_codes(toy_config, tmp_path):
    env = {"RANGESEQ_DATA__DATASET": str(tmp_path / "missing")}
    assert run(["train", "--config", toy_config, "--out", str(tmp_path / "x")], environ=env) == EXIT_DATA
    assert run(["eval", "--config", toy_config, "--out", str(tmp_path / "y"), "--checkpoint",
                str(tmp_path / "nope.rctf")], environ={}) == EXIT_DATA
    env = {"RANGESEQ_TRAIN__ALPHA_S": "1.0"}
    assert run(["train", "--config", toy_config, "--out", str(tmp_path / "z")], environ=env) == EXIT_CONFIG
    assert run(["info", "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path)], environ={}) == EXIT_CONFIG


def test_checkpoint_config_mismatch_is_config_error(toy_config, tmp_path):
    t = tmp_path / "t"
    run(["train", "--config", toy_config, "--out", str(t)], environ={})
    env = {"RANGESEQ_MODEL__BRANCH": "W"}
    code = run(["eval", "--config", toy_config, "--out", str(tmp_path / "e"), "--checkpoint",
                str(t / "checkpoints" / "last.rctf")], environ=env)
    assert code == EXIT_CONFIG
