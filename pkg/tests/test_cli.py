import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from reve import config as runcfg
from reve.cli import main
from reve.flops import flops_estimate
from reve.model import ConfigError

SMALL = {
    "schema": "reve-run/1",
    "synth": {"channels": 4, "recordings_per_class": 4, "duration": 10.0},
    "pretrain": {"steps": 4, "batch_size": 4},
    "finetune": {"total_steps": 4, "freeze_steps": 2, "batch_size": 4, "warmup_steps": 1, "eval_every": 2},
    "eval": {"n_shots": 2, "n_runs": 3, "seeds": [0, 1]},
}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pre")
    cfg = write_cfg(tmp)
    assert run("pretrain", "--config", cfg, "--out", tmp / "a", "--seed", 3) == 0
    return tmp, cfg


def test_pretrain_bit_identical(pretrained, tmp_path):
    tmp, cfg = pretrained
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "b", "--seed", 3) == 0
    a = (tmp / "a" / "checkpoint" / "tensors.bin").read_bytes()
    b = (tmp_path / "b" / "checkpoint" / "tensors.bin").read_bytes()
    assert a == b


def test_artifacts_carry_resolved_config(pretrained):
    tmp, _ = pretrained
    saved = json.loads((tmp / "a" / "config.json").read_text())
    assert saved["seed"] == 3 and saved["pretrain"]["steps"] == 4
    assert runcfg.resolve(saved).to_dict() == saved
    log = [json.loads(l) for l in (tmp / "a" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 4


def test_probe_reports_balanced_accuracy(pretrained, tmp_path, capsys):
    tmp, cfg = pretrained
    ck = tmp / "a" / "checkpoint"
    assert run("probe", "--config", cfg, "--out", tmp_path, "--override", f"data.checkpoint={ck}") == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0 <= metrics["balanced_accuracy"] <= 1
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert status["status"] == "ok" and status["command"] == "probe"


def test_embed_and_eval_pretrained(pretrained, tmp_path):
    tmp, cfg = pretrained
    ck = tmp / "a" / "checkpoint"
    assert run("embed", "--config", cfg, "--out", tmp_path / "e", "--override", f"data.checkpoint={ck}") == 0
    z = np.load(tmp_path / "e" / "embeddings.npz")
    assert z["mean"].shape == (8, 32) and z["attention"].shape == (8, 32) and z["labels"].tolist() == [0, 1] * 4
    assert run("eval", "--config", cfg, "--out", tmp_path / "v", "--override", f"data.checkpoint={ck}",
               "--override", 'data.keep_channels=["Fp1","F3"]') == 0
    m = json.loads((tmp_path / "v" / "metrics.json").read_text())
    assert "ncm_balanced_accuracy" in m and m["channels"] == ["Fp1", "F3"]


def test_finetune_soup_eval(pretrained, tmp_path):
    tmp, cfg = pretrained
    ck = tmp / "a" / "checkpoint"
    ov = ["--override", f"data.checkpoint={ck}"]
    assert run("finetune", "--config", cfg, "--out", tmp_path / "ft", *ov) == 0
    summary = json.loads((tmp_path / "ft" / "metrics.json").read_text())
    assert summary["seeds"] == [0, 1] and summary["aggregate"]["balanced_accuracy"]["n"] == 2
    rows = list(csv.reader((tmp_path / "ft" / "metrics.csv").open()))
    assert rows[0][0] == "seed" and len(rows) == 3
    members = [str(tmp_path / "ft" / f"seed{s}" / "checkpoint") for s in (0, 1)]
    assert run("soup", "--config", cfg, "--out", tmp_path / "soup", "--override", f"data.checkpoints={json.dumps(members)}") == 0
    souped = tmp_path / "soup" / "checkpoint"
    assert run("eval", "--config", cfg, "--out", tmp_path / "ev", "--override", f"data.checkpoint={souped}") == 0
    assert "balanced_accuracy" in json.loads((tmp_path / "ev" / "metrics.json").read_text())


@pytest.mark.slow
def test_parallel_finetune_matches_sequential(pretrained, tmp_path):
    tmp, cfg = pretrained
    ov = ["--override", f"data.checkpoint={tmp / 'a' / 'checkpoint'}"]
    assert run("finetune", "--config", cfg, "--out", tmp_path / "s", *ov) == 0
    assert run("finetune", "--config", cfg, "--out", tmp_path / "p", "--parallel", 2, *ov) == 0
    for s in (0, 1):
        a = (tmp_path / "s" / f"seed{s}" / "checkpoint" / "tensors.bin").read_bytes()
        b = (tmp_path / "p" / f"seed{s}" / "checkpoint" / "tensors.bin").read_bytes()
        assert a == b


def test_synth_then_preprocess(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run("synth", "--config", cfg, "--out", tmp_path / "s") == 0
    corpus = tmp_path / "s" / "corpus"
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "p", "--override", f"data.corpus={corpus}") == 0
    assert len(list((tmp_path / "p" / "corpus").glob("*.json"))) >= 8


def test_unknown_key_named(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"pretrain": {"stepz": 3}, "bogus": 1})
    rc = run("flops", "--config", cfg, "--out", tmp_path / "o")
    assert rc == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["status"] == "error" and record["type"] == "ConfigError"
    text = " ".join(record["errors"])
    assert "stepz" in text and "bogus" in text
    assert json.loads((tmp_path / "o" / "error.json").read_text()) == record


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as e:
        runcfg.resolve({"schema": "reve-run/1", "model": {"dim": 30, "heads": 4}, "optim": {"beta1": 2.0}, "x": 1})
    errs = e.value.errors
    assert any("'x'" in m for m in errs) and any(m.startswith("optim") for m in errs) and any(m.startswith("model") for m in errs)


def test_missing_input_is_nonzero(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert run("probe", "--config", cfg, "--out", tmp_path / "o", "--override", f"data.checkpoint={tmp_path / 'nope'}") == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["status"] == "error"


def test_config_round_trip(tmp_path):
    rc = runcfg.resolve(json.loads(write_cfg(tmp_path) and (tmp_path / "cfg.json").read_text()), ["optim.lr_peak=0.001", "finetune.lora={\"rank\": 4}"], seed=7)
    path = tmp_path / "rt.json"
    rc.save(path)
    again = runcfg.load(path)
    assert again.to_dict() == rc.to_dict() and again.seed == 7
    assert again.finetune.lora.rank == 4 and again.optim.lr_peak == 0.001


def test_flops_command_and_linearity(tmp_path):
    assert run("flops", "--out", tmp_path) == 0
    res = json.loads((tmp_path / "flops.json").read_text())
    assert abs(res["gpu_hours"] - 260) / 260 <= 0.05
    base = dict(D_tokens=1e9, N=1e6, L=0, H=8, Q=64, T_tokens=100, P_throughput=1e12, mfu=0.5)
    half = flops_estimate(**{**base, "mfu": 1.0})["seconds"]
    assert half * 2 == flops_estimate(**base)["seconds"]
    assert flops_estimate(**{**base, "N": 2e6})["seconds"] == 2 * flops_estimate(**base)["seconds"]
    for bad in (dict(P_throughput=0), dict(mfu=0), dict(N=-1)):
        with pytest.raises(ValueError):
            flops_estimate(**{**base, **bad})


def test_lr_curve_csv(tmp_path):
    assert run("lr-curve", "--out", tmp_path, "--override", "schedule.steps_per_epoch=50") == 0
    rows = list(csv.reader((tmp_path / "lr_curve.csv").open()))
    assert rows[0] == ["step", "lr"] and len(rows) == 52
    lrs = [float(r[1]) for r in rows[1:]]
    assert lrs[0] == 0.0 and max(lrs) == 2.4e-4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "reve", "flops", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["result"]["gpu_hours"] > 0
