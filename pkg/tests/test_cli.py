import json
import subprocess
import sys

import numpy as np
import pytest

from adapool import adae, cli
from adapool.config import ExperimentConfig


def tiny_config(out_dir, methods=None, seeds=(0, 1), cadence=0):
    return {
        "version": 1,
        "stream": {"num_tasks": 2, "t_per_class": 10, "test_per_class": 5,
                   "separation": 6.0},
        "train": {"max_epochs": 5},
        "distill": {"max_epochs": 20},
        "pool": {"pool_size": 2, "buffer_capacity": 60},
        "methods": methods or [{"tag": "B1"}, {"tag": "ADA_TRANSRATE"}],
        "seeds": list(seeds),
        "output_dir": str(out_dir),
        "checkpoint_cadence": cadence,
    }


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def read_all(out_dir):
    return {p.name: p.read_bytes()
            for p in sorted(out_dir.rglob("*")) if p.is_file()}


def test_run_produces_cells_reports_and_checkpoints(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = write_config(tmp_path, tiny_config(out, cadence=1))
    assert cli.main(["run", "--config", cfg_path]) == 0

    cells = sorted((out / "cells").glob("*.json"))
    assert [p.name for p in cells] == [
        "ADA_TRANSRATE_seed0.json", "ADA_TRANSRATE_seed1.json",
        "B1_seed0.json", "B1_seed1.json"]
    rec = json.loads(cells[0].read_text())
    assert rec["format"] == "adapool-cell" and rec["n_tasks"] == 2
    assert len(rec["R"]) == 2 and len(rec["b_bar"]) == 2
    assert rec["summary"]["avg_acc"] > 0.5
    assert rec["params"]["total"] > 0

    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "method,seed,avg_acc,bwt,fwt"
    assert len(summary) == 1 + 4
    curves = (out / "curves.csv").read_text().splitlines()
    assert curves[0] == "method,task,mean,std"
    assert len(curves) == 1 + 2 * 2  # methods x tasks
    assert (out / "bwt_fwt.csv").exists()
    assert (out / "params.csv").exists()
    assert (out / "params_vs_acc.csv").exists()

    # final checkpoint for the pool method, per-task ones from cadence=1
    ckpts = {p.name for p in (out / "checkpoints").glob("*.ckpt")}
    assert "ADA_TRANSRATE_seed0_final.ckpt" in ckpts
    assert "ADA_TRANSRATE_seed0_task1.ckpt" in ckpts
    assert not any(n.startswith("B1") for n in ckpts)


def test_rerun_is_idempotent_and_byte_identical(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = write_config(tmp_path, tiny_config(out, seeds=(0,)))
    assert cli.main(["run", "--config", cfg_path]) == 0
    first = read_all(out)
    capsys.readouterr()
    assert cli.main(["run", "--config", cfg_path]) == 0
    msgs = capsys.readouterr().out
    assert msgs.count("kept (hash match)") == 2
    assert "0 computed" in msgs
    assert read_all(out) == first


def test_stale_cell_from_other_config_is_rejected(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_a = tiny_config(out, methods=[{"tag": "B1"}], seeds=(0,))
    assert cli.main(["run", "--config", write_config(tmp_path, cfg_a)]) == 0
    cfg_b = dict(cfg_a, train={"max_epochs": 9})
    path_b = tmp_path / "b.json"
    path_b.write_text(json.dumps(cfg_b))
    assert cli.main(["run", "--config", str(path_b)]) == 1
    assert "different config" in capsys.readouterr().err


def test_parallel_jobs_match_serial(tmp_path):
    serial, parallel = tmp_path / "s", tmp_path / "p"
    cfg_s = write_config(tmp_path, tiny_config(serial, seeds=(0, 1)))
    path_p = tmp_path / "p.json"
    path_p.write_text(json.dumps(tiny_config(parallel, seeds=(0, 1))))
    assert cli.main(["run", "--config", cfg_s]) == 0
    assert cli.main(["run", "--config", str(path_p), "--jobs", "2"]) == 0
    a, b = read_all(serial), read_all(parallel)
    assert set(a) == set(b)
    for name in a:
        if name.endswith(".csv"):
            assert a[name] == b[name], name
        elif name.endswith(".json") and name != "run_meta.json":
            ra, rb = json.loads(a[name]), json.loads(b[name])
            ra.pop("timing_seconds"), rb.pop("timing_seconds")
            assert ra == rb, name
        else:
            assert a[name] == b[name], name


def test_report_json_and_empty_dir(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = write_config(tmp_path, tiny_config(out, seeds=(0,),
                                                  methods=[{"tag": "B1"}]))
    assert cli.main(["run", "--config", cfg_path]) == 0
    assert cli.main(["report", "--dir", str(out), "--format", "json"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert {"summary", "curves", "bwt_fwt", "params",
            "params_vs_acc"} <= set(rep)
    # single seed: std columns identically zero
    assert all(row["std"] == 0.0 for row in rep["curves"])

    empty = tmp_path / "empty"
    empty.mkdir()
    capsys.readouterr()
    assert cli.main(["report", "--dir", str(empty)]) == 1
    assert "no run records" in capsys.readouterr().err


def test_env_overrides_output_dir_and_jobs(tmp_path, monkeypatch):
    out = tmp_path / "envruns"
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(out))
    monkeypatch.setenv(cli.ENV_JOBS, "1")
    cfg = tiny_config(tmp_path / "ignored", seeds=(0,),
                      methods=[{"tag": "B1"}])
    assert cli.main(["run", "--config", write_config(tmp_path, cfg)]) == 0
    assert (out / "cells" / "B1_seed0.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_score_features_only(tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 1, (40, 6)), rng.normal(5, 1, (40, 6))])
    Y = np.repeat([0, 1], 40).astype(np.uint32)
    path = tmp_path / "f.adae"
    adae.write_adae(path, X.astype(np.float32), Y, 2)
    assert cli.main(["score", "--features", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 80 and out["d_in"] == 6 and out["label_arity"] == 2
    assert out["transrate"] > 0 and not out["transrate_degenerate"]
    assert out["leep"] is None

    # unlabeled file: degenerate by construction
    flat = tmp_path / "u.adae"
    adae.write_adae(flat, X.astype(np.float32), np.zeros(80, np.uint32), 0)
    assert cli.main(["score", "--features", str(flat)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["transrate"] == 0.0 and out["transrate_degenerate"]


def test_score_with_model_checkpoint(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg_path = write_config(
        tmp_path, tiny_config(out, seeds=(0,),
                              methods=[{"tag": "ADA_TRANSRATE"}]))
    assert cli.main(["run", "--config", cfg_path]) == 0
    ckpt = out / "checkpoints" / "ADA_TRANSRATE_seed0_final.ckpt"

    cfg = ExperimentConfig(json.loads((tmp_path / "config.json").read_text()))
    task = cfg.build_stream()[0]
    feats = tmp_path / "t1.adae"
    adae.write_adae(feats, task.x_train.astype(np.float32),
                    task.y_train.astype(np.uint32), 2)
    capsys.readouterr()
    assert cli.main(["score", "--features", str(feats),
                     "--model", str(ckpt)]) == 0
    got = json.loads(capsys.readouterr().out)
    assert len(got["slots"]) == 2
    assert got["selected_slot"] in (0, 1)
    for entry in got["slots"]:
        assert entry["leep"] <= 0
        assert entry["transrate"] >= 0


def test_exit_codes_for_bad_inputs(tmp_path, capsys):
    # config errors -> 1
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1, "methods": []}))
    assert cli.main(["run", "--config", str(bad)]) == 1
    # malformed argv -> 1 via the parser override
    assert cli.main(["run"]) == 1
    assert cli.main(["report", "--dir", "x", "--format", "yaml"]) == 1
    # data errors -> 2
    assert cli.main(["score", "--features", str(tmp_path / "nope.adae")]) == 2
    junk = tmp_path / "junk.adae"
    junk.write_bytes(b"XXXX" + b"\x00" * 30)
    assert cli.main(["score", "--features", str(junk)]) == 2
    capsys.readouterr()


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "adapool", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "run" in proc.stdout and "score" in proc.stdout
