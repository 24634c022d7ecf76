import json

import numpy as np
import pytest

from lordnet import cli
from lordnet.channel import export_channel, load_dataset, sample_rayleigh_channel
from lordnet.harness import ber
from lordnet.unfolded import load_checkpoint

FAST = ["--epochs1", "20", "--epochs2", "5", "--layers", "6"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "train.ds"
    assert run("generate", "--m", 8, "--n", 2, "--snr-db", 6, "--batch", 64, "--seed", 5,
               "--channel-out", tmp_path / "h.txt", "--out", path) == 0
    return path


def test_generate_meta_matches_flags(data, tmp_path):
    ds = load_dataset(data)
    assert (ds.meta.m, ds.meta.n, ds.meta.B, ds.meta.snr_db, ds.meta.seed) == (8, 2, 64, 6.0, 5)
    assert ds.provenance["config"]["batch"] == 64
    again = tmp_path / "again.ds"
    run("generate", "--m", 8, "--n", 2, "--snr-db", 6, "--batch", 64, "--seed", 5, "--out", again)
    other = load_dataset(again)
    np.testing.assert_array_equal(other.r_obs, ds.r_obs)
    np.testing.assert_array_equal(other.x_true, ds.x_true)


def test_generate_with_imported_channel(tmp_path, data):
    out = tmp_path / "imp.ds"
    assert run("generate", "--m", 8, "--n", 2, "--channel-file", tmp_path / "h.txt",
               "--out", out) == 0
    assert load_dataset(out).meta.channel_kind == "imported"
    export_channel(sample_rayleigh_channel(3, 2, 0), tmp_path / "bad.txt")
    assert run("generate", "--m", 8, "--n", 2, "--channel-file", tmp_path / "bad.txt",
               "--out", out) == cli.EXIT_VALIDATION


def test_usage_errors(tmp_path, capsys):
    assert run("generate") == cli.EXIT_USAGE
    assert "--out" in capsys.readouterr().err
    assert run("sweep", "--axis", "frequency", "--out", tmp_path / "s") == cli.EXIT_USAGE
    assert run("frobnicate") == cli.EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": 3}))
    assert run("generate", "--config", cfg, "--out", tmp_path / "x.ds") == cli.EXIT_USAGE


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"m": 6, "snr-db": 3.0, "batch": 10}))
    out = tmp_path / "p.ds"
    assert run("generate", "--config", cfg, "--batch", 12, "--out", out) == 0
    meta = load_dataset(out).meta
    assert (meta.m, meta.n, meta.snr_db, meta.B) == (6, 8, 3.0, 12)


def test_train_writes_checkpoint_and_log(data, tmp_path):
    out = tmp_path / "model.json"
    assert run("train", "--data", data, "--out", out, *FAST) == 0
    ckpt = load_checkpoint(out)
    assert ckpt.phi.L == 6 and ckpt.theta.H.shape == (8, 2)
    assert ckpt.extra["train_config"]["mode"] == "two_stage"
    lines = [json.loads(s) for s in open(str(out) + ".log.ndjson")]
    assert lines[0]["event"] == "config"
    assert [r["stage"] for r in lines[1:]] == ["stage1"] * 20 + ["stage2"] * 5


def test_train_defaults_resolved(data, tmp_path):
    cfg = cli.resolve("train", {"data": str(data), "out": "x"})
    tc = cli._train_config(cfg)
    assert (tc.L, tc.delta, tc.epochs_stage1, tc.epochs_stage2) == (30, 0.01, 400, 400)
    assert tc.lr_stage1 == 1e-3 and tc.lr_stage2 == 1e-4 and tc.batch_size == 512


def test_train_one_stage_records_joint(data, tmp_path):
    out = tmp_path / "m1.json"
    log = tmp_path / "m1.ndjson"
    assert run("train", "--data", data, "--out", out, "--log", log, "--mode", "one-stage",
               *FAST) == 0
    stages = {json.loads(s).get("stage") for s in open(log)} - {None}
    assert stages == {"joint"}


def test_train_is_bitwise_reproducible(data, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run("train", "--data", data, "--out", a, *FAST)
    run("train", "--data", data, "--out", b, *FAST)
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    for doc in (da, db):
        doc["config"].pop("out")
        doc["config"].pop("log")
    assert da == db


def test_train_divergence_exits_numerical(data, tmp_path, capsys):
    code = run("train", "--data", data, "--out", tmp_path / "d.json", "--lr1", 1e200, *FAST)
    assert code == cli.EXIT_NUMERICAL
    assert "stage=stage1" in capsys.readouterr().err


def test_detect_ber_matches_harness(data, tmp_path):
    model = tmp_path / "model.json"
    run("train", "--data", data, "--out", model, *FAST)
    test = tmp_path / "test.ds"
    run("generate", "--m", 8, "--n", 2, "--snr-db", 6, "--batch", 100, "--seed", 5,
        "--channel-file", tmp_path / "h.txt", "--out", test)
    est = tmp_path / "est.txt"
    assert run("detect", "--checkpoint", model, "--data", test, "--out", est) == 0
    lines = est.read_text().splitlines()
    header = json.loads(lines[0])
    x_hat = np.array([[float(v) for v in s.split()] for s in lines[1:]])
    ds = load_dataset(test)
    assert x_hat.shape == ds.x_true.shape and header["num_bits"] == 200
    assert header["num_errors"] / header["num_bits"] == ber(x_hat, ds.x_true)


@pytest.mark.parametrize("detector", ["nml", "relaxed", "bruteforce"])
def test_detect_coherent_baselines(data, tmp_path, detector):
    est = tmp_path / "e.txt"
    assert run("detect", "--detector", detector, "--channel-file", tmp_path / "h.txt",
               "--data", data, "--out", est) == 0
    header = json.loads(est.read_text().splitlines()[0])
    assert header["detector"] == detector and header["num_bits"] == 128
    if detector == "nml":
        assert header["step"] in (0.001, 0.003, 0.01, 0.03, 0.1, 0.3)


def test_detect_errors(data, tmp_path):
    est = tmp_path / "e.txt"
    assert run("detect", "--data", data, "--out", est) == cli.EXIT_VALIDATION
    assert run("detect", "--detector", "nml", "--data", data, "--out", est) == cli.EXIT_VALIDATION
    big = tmp_path / "big.ds"
    run("generate", "--m", 4, "--n", 21, "--batch", 1, "--channel-out", tmp_path / "hb.txt",
        "--out", big)
    assert run("detect", "--detector", "bruteforce", "--channel-file", tmp_path / "hb.txt",
               "--data", big, "--out", est) == cli.EXIT_VALIDATION
    model = tmp_path / "model.json"
    run("train", "--data", data, "--out", model, *FAST)
    assert run("detect", "--checkpoint", model, "--data", big, "--out", est) == \
        cli.EXIT_VALIDATION


def test_sweep_snr_outputs(tmp_path):
    prefix = tmp_path / "sw"
    assert run("sweep", "--axis", "snr", "--detector", "nml", "--m", 8, "--n", 2,
               "--batch", 16, "--trials", 20, "--out", prefix) == 0
    rep = json.loads((tmp_path / "sw.json").read_text())
    assert [p["axis_value"] for p in rep["points"]] == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    rows = (tmp_path / "sw.csv").read_text().splitlines()
    assert len(rows) == 7 and rows[0].startswith("axis_value,ber")


def test_sweep_layer_axis(data, tmp_path):
    model = tmp_path / "model.json"
    run("train", "--data", data, "--out", model, *FAST)
    prefix = tmp_path / "layers"
    assert run("sweep", "--axis", "layer", "--checkpoint", model, "--data", data,
               "--out", prefix) == 0
    rep = json.loads((tmp_path / "layers.json").read_text())
    assert [p["axis_value"] for p in rep["points"]] == list(range(7))
    assert run("sweep", "--axis", "layer", "--out", prefix) == cli.EXIT_USAGE
