import csv
import json
from pathlib import Path

import numpy as np
import pytest

from simreuse.cli import run
from simreuse.config import config_from_dict, load_config
from simreuse.regularizers import ConfigError
from simreuse.streams import FrameStream, gen_stream, save_stream
from simreuse.training import load_checkpoint


def small_config(**over) -> dict:
    cfg = {
        "schema": 1,
        "seed": 3,
        "stream": {"n_frames": 32, "shape": [8, 8, 1], "rho": 0.9},
        "eval_stream": {"n_frames": 32, "shape": [8, 8, 1], "rho": 0.9, "seed_offset": 100},
        "model": {"hash_size": 8, "input_dim": 6},
        "train": {"pretrain_epochs": 1, "sa_epochs": 1},
        "reg": {"lam": 0.001, "lam_t": 10.0},
        "tune": {"n_total": 8},
        "analyze": {"max_frames": 16, "profile_frames": 4},
        "sweep": {"param": "window", "values": [1, 2, 4]},
    }
    for key, val in over.items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    return cfg


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def invoke(tmp_path, command, cfg, name="out", seed=None):
    out = tmp_path / name
    argv = [command, "--config", str(write_cfg(tmp_path / f"{name}.json", cfg)), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return run(argv), out


def constant_stream(path, n=16, value=0.5, shape=(8, 8, 1)):
    save_stream(path, FrameStream(np.full((n, *shape), value), np.zeros(n, dtype=int), 1.0, 2))
    return str(path)


# -- config ---------------------------------------------------------------------------

def test_config_round_trip_and_hash():
    cfg = config_from_dict(small_config())
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
    assert cfg.with_seed(4).hash() != cfg.hash()
    assert len(cfg.hash()) == 16


@pytest.mark.parametrize("bad", [
    {"schema": 2},
    {"bogus": 1},
    {"model": {"arch": "resnet"}},
    {"reg": {"lam": -1.0}},
    {"stream": {"rho": 2.0}},
    {"train": {"typo_lr": 0.1}},
    {"seed": -1},
    {"tune": {"n_init": 9, "n_total": 4}},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(small_config(**bad))


def test_invalid_json_is_a_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


# -- exit codes -----------------------------------------------------------------------

def test_missing_stream_file_exits_2(tmp_path, capsys):
    code, _ = invoke(tmp_path, "analyze", small_config(stream={"path": str(tmp_path / "nope.rfs")}))
    assert code == 2
    assert "nope.rfs" in capsys.readouterr().err


def test_corrupt_stream_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.rfs"
    bad.write_bytes(b"RFS1\x00")
    code, _ = invoke(tmp_path, "analyze", small_config(stream={"path": str(bad)}))
    assert code == 2
    assert "bad.rfs" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run(["analyze", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2


def test_config_error_exits_4(tmp_path):
    code, _ = invoke(tmp_path, "analyze", small_config(schema=7))
    assert code == 4


def test_missing_checkpoint_exits_2(tmp_path):
    code, _ = invoke(tmp_path, "bench", small_config(bench={"checkpoints": [str(tmp_path / "x.rfck")]}))
    assert code == 2


def test_bench_without_checkpoints_exits_4(tmp_path):
    assert invoke(tmp_path, "bench", small_config())[0] == 4


def test_architecture_mismatch_exits_4(tmp_path):
    code, out = invoke(tmp_path, "train", small_config(train={"sa_epochs": 0}), name="t")
    assert code == 0
    code, _ = invoke(tmp_path, "tune", small_config(model={"arch": "tiny_vit", "checkpoint": str(out / "model.rfck")}))
    assert code == 4


def test_non_finite_training_exits_3(tmp_path, capsys):
    s = gen_stream(16, (8, 8, 1), 0.9, 2, seed=0)
    frames = s.frames.copy()
    frames[5] = np.nan
    save_stream(tmp_path / "nan.rfs", FrameStream(frames, s.labels, 0.9, 2))
    code, _ = invoke(tmp_path, "train", small_config(stream={"path": str(tmp_path / "nan.rfs")}))
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


# -- analyze --------------------------------------------------------------------------

def test_identical_frames_give_all_ones_csv(tmp_path):
    code, out = invoke(tmp_path, "analyze", small_config(stream={"path": constant_stream(tmp_path / "c.rfs")}))
    assert code == 0
    lines = (out / "similarity.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    rows = list(csv.reader(lines[2:]))
    assert len(rows) == 16 and all(float(v) == 1.0 for r in rows for v in r)


def test_analyze_report_orders_lags(tmp_path):
    code, out = invoke(tmp_path, "analyze", small_config(stream={"n_frames": 64, "rho": 0.9},
                                                          analyze={"max_frames": 64}))
    assert code == 0
    rep = json.loads((out / "analyze.json").read_text())
    sim = np.array(list(csv.reader((out / "similarity.csv").read_text().splitlines()[2:])), dtype=float)
    assert rep["adjacent_mean"] == pytest.approx(np.mean(np.diagonal(sim, 1)), abs=1e-12)
    assert rep["adjacent_mean"] > rep["far_mean"]
    assert set(rep["layer_profile"]) == {"conv1", "conv2", "fc"}
    assert rep["config_hash"] == config_from_dict(small_config(stream={"n_frames": 64, "rho": 0.9},
                                                               analyze={"max_frames": 64})).hash()


# -- tune -----------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["tiny_conv", "tiny_vit"])
def test_constant_calibration_gives_zero_theta(tmp_path, arch):
    cfg = small_config(stream={"path": constant_stream(tmp_path / "c.rfs")}, model={"arch": arch})
    code, out = invoke(tmp_path, "tune", cfg)
    assert code == 0
    layers = json.loads((out / "tuning.json").read_text())["layers"]
    assert all(v["theta"] <= 1e-24 for v in layers.values())


def test_tuning_file_feeds_training(tmp_path):
    code, out = invoke(tmp_path, "tune", small_config(), name="tune")
    assert code == 0
    tuned = json.loads((out / "tuning.json").read_text())["layers"]
    code, tout = invoke(tmp_path, "train", small_config(model={"tuning": str(out / "tuning.json")}), name="train")
    assert code == 0
    model, _ = load_checkpoint(tout / "model.rfck")
    for layer, rec in tuned.items():
        assert model.hashers[layer].hash_size == rec["hash_size"]
        assert model.hashers[layer].input_dim == rec["input_dim"]


# -- train ----------------------------------------------------------------------------

def test_train_outputs(tmp_path):
    cfg = small_config()
    code, out = invoke(tmp_path, "train", cfg)
    assert code == 0
    h = config_from_dict(cfg).hash()
    rows = [json.loads(ln) for ln in (out / "reports.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in rows] == ["pretrain", "sa"]
    fields = {"epoch", "task_loss", "r", "r_t", "sigma", "recon_mse", "metric", "config_hash"}
    assert all(fields <= set(r) and r["config_hash"] == h for r in rows)
    _, extra = load_checkpoint(out / "model.rfck")
    assert extra["config_hash"] == h
    summary = json.loads((out / "train.json").read_text())
    assert summary["config_hash"] == h
    timing = json.loads((out / "timing.json").read_text())
    assert timing["config_hash"] == h and timing["command"] == "train"


def test_zero_regularization_train_matches_plain_pretrain(tmp_path):
    off = {"lam": 0.0, "lam_t": 0.0}
    a = small_config(train={"pretrain_epochs": 2, "sa_epochs": 0}, reg=off)
    b = small_config(train={"pretrain_epochs": 0, "sa_epochs": 2, "reuse_in_training": False}, reg=off)
    assert invoke(tmp_path, "train", a, name="a")[0] == 0
    assert invoke(tmp_path, "train", b, name="b")[0] == 0
    ra = [json.loads(ln) for ln in (tmp_path / "a" / "reports.jsonl").read_text().splitlines()]
    rb = [json.loads(ln) for ln in (tmp_path / "b" / "reports.jsonl").read_text().splitlines()]
    assert [r["task_loss"] for r in ra] == [r["task_loss"] for r in rb]
    ma, _ = load_checkpoint(tmp_path / "a" / "model.rfck")
    mb, _ = load_checkpoint(tmp_path / "b" / "model.rfck")
    assert all(np.array_equal(ma.params[k], mb.params[k]) for k in ma.params)


# -- bench ----------------------------------------------------------------------------

@pytest.fixture
def checkpoint(tmp_path):
    code, out = invoke(tmp_path, "train", small_config(train={"sa_epochs": 0}), name="ck")
    assert code == 0
    return str(out / "model.rfck")


def test_bench_speedup_recomputes_from_layers(tmp_path, checkpoint):
    code, out = invoke(tmp_path, "bench", small_config(bench={"checkpoints": [checkpoint], "quantize": True}))
    assert code == 0
    rep = json.loads((out / "bench.json").read_text())
    row = rep["rows"][0]
    exact = sum(v["macs_exact"] for v in row["layers"].values())
    reuse = sum(v["macs_reuse"] for v in row["layers"].values())
    assert row["speedup"] == pytest.approx(exact / reuse, abs=1e-9)
    assert row["speedup"] > 0
    assert row["reduction_pct"] == pytest.approx((1 - reuse / exact) * 100, abs=1e-9)
    assert {"metric_quant", "sigma_quant", "speedup_quant"} <= set(row)
    table = list(csv.DictReader((out / "bench.csv").read_text().splitlines()))
    assert table[0]["config_hash"] == rep["config_hash"]


def test_bench_many_bits_shows_overhead(tmp_path, checkpoint):
    code, out = invoke(tmp_path, "bench", small_config(bench={"checkpoints": [checkpoint], "hash_size": 64}))
    assert code == 0
    row = json.loads((out / "bench.json").read_text())["rows"][0]
    assert row["speedup"] < 1.0


def test_bench_duplicated_frames(tmp_path, checkpoint):
    s = gen_stream(1, (8, 8, 1), 0.9, 2, seed=1)
    dup = FrameStream(np.repeat(s.frames, 32, axis=0), np.repeat(s.labels, 32), 1.0, 2)
    save_stream(tmp_path / "dup.rfs", dup)
    cfg = small_config(eval_stream={"path": str(tmp_path / "dup.rfs")},
                       bench={"checkpoints": [checkpoint], "hash_size": 16})
    code, out = invoke(tmp_path, "bench", cfg)
    assert code == 0
    row = json.loads((out / "bench.json").read_text())["rows"][0]
    assert row["metric_reuse"] == row["metric_exact"]
    assert row["speedup"] > 1.0


# -- sweep ----------------------------------------------------------------------------

def test_sweep_rows(tmp_path):
    code, out = invoke(tmp_path, "sweep", small_config())
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").read_text().splitlines()))
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    assert all(r["status"] == "ok" for r in rows)
    assert all((out / f"window_{v}" / "reports.jsonl").exists() for v in (1, 2, 4))


def test_single_value_sweep_matches_train(tmp_path):
    cfg = small_config(sweep={"param": "lam_t", "values": [10.0]})
    assert invoke(tmp_path, "sweep", cfg, name="sw")[0] == 0
    assert invoke(tmp_path, "train", cfg, name="tr")[0] == 0
    a, _ = load_checkpoint(tmp_path / "sw" / "lam_t_10.0" / "model.rfck")
    b, _ = load_checkpoint(tmp_path / "tr" / "model.rfck")
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    sw = (tmp_path / "sw" / "lam_t_10.0" / "reports.jsonl").read_text()
    assert sw == (tmp_path / "tr" / "reports.jsonl").read_text()


def test_sweep_records_failures_per_row(tmp_path):
    code, out = invoke(tmp_path, "sweep", small_config(sweep={"param": "window", "values": [0, 2]}))
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").read_text().splitlines()))
    assert rows[0]["status"].startswith("error") and rows[1]["status"] == "ok"


# -- determinism ----------------------------------------------------------------------

@pytest.mark.parametrize("command", ["analyze", "tune", "train", "sweep"])
def test_reruns_are_byte_identical(tmp_path, command):
    cfg = small_config(sweep={"values": [2]})
    assert invoke(tmp_path, command, cfg, name="a")[0] == 0
    assert invoke(tmp_path, command, cfg, name="b")[0] == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        if rel.name != "timing.json":
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_seed_flag_overrides_config(tmp_path):
    assert invoke(tmp_path, "analyze", small_config(), name="a", seed=11)[0] == 0
    rep = json.loads((tmp_path / "a" / "analyze.json").read_text())
    assert rep["config_hash"] == config_from_dict(small_config(seed=11)).hash()


def test_demo_sweep_metric_non_decreasing_in_window(tmp_path, monkeypatch):
    root = Path(__file__).resolve().parents[1]
    monkeypatch.chdir(root)
    out = tmp_path / "demo"
    assert run(["sweep", "--config", "configs/demo.json", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: float(r["value"]))
    assert [float(r["value"]) for r in rows] == [1.0, 2.0, 4.0]
    metrics = [float(r["final_metric"]) for r in rows]
    assert all(b >= a for a, b in zip(metrics, metrics[1:]))
