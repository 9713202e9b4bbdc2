"""Command-line pipeline on a miniature run: stages, manifests, reruns."""

import hashlib
import json
import os
from types import SimpleNamespace

import pytest

from epiflow.cli import main

TINY_CONFIG = """
[env]
episode_length = 30

[dataset]
n_traj = 6
horizon = 20
seed = 3

[values]
steps = 40
batch = 32
hidden = 16,16

[policy]
steps = 12
batch = 32
hidden = 8
integration_steps = 2
candidates = 2

[threshold]
iterations = 10

[eval]
n_episodes = 3
n_seeds = 2
horizon = 10
perturb_levels = 0.1

[run]
seed = 5
out_dir = {out}
"""

CHAIN_MDP = """
[mdp]
states = a b goal
actions = stay go
gamma = 0.9

[reward]
a = 0.0
b = 0.5
goal = 1.0

[safety]
a = 1.0
b = 1.0
goal = 1.0

[edges]
a.stay = a
a.go = b
b.stay = b
b.go = goal
goal.stay = goal
goal.go = goal
"""


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "out"
    cfg_path = root / "run.ini"
    cfg_path.write_text(TINY_CONFIG.format(out=out))
    for cmd in ("gen-data", "train-values", "train-policy", "eval"):
        assert main([cmd, "--config", str(cfg_path)]) == 0
    return SimpleNamespace(cfg=str(cfg_path), out=out, root=root)


def test_pipeline_artifacts(pipeline):
    for name in (
        "dataset.bin",
        "values.bundle",
        "values_history.csv",
        "policy.bin",
        "eval_report.csv",
        "eval_summary.json",
        "eval_timing.json",
        "gen-data.manifest.json",
        "train-values.manifest.json",
        "train-policy.manifest.json",
        "eval.manifest.json",
    ):
        assert (pipeline.out / name).exists(), name


def test_manifest_checksums_verify(pipeline):
    manifest = json.loads((pipeline.out / "gen-data.manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 5
    assert manifest["config_sha256"] == hashlib.sha256(
        manifest["config"].encode()
    ).hexdigest()
    assert manifest["outputs"]["dataset.bin"] == sha256(pipeline.out / "dataset.bin")
    ev_manifest = json.loads((pipeline.out / "eval.manifest.json").read_text())
    assert set(ev_manifest["inputs"]) == {"values.bundle", "policy.bin"}


def test_gen_data_rerun_is_byte_identical(pipeline):
    before = (pipeline.out / "dataset.bin").read_bytes()
    assert main(["gen-data", "--config", pipeline.cfg]) == 0
    assert (pipeline.out / "dataset.bin").read_bytes() == before


def test_eval_rerun_reproduces_reports(pipeline):
    summary = (pipeline.out / "eval_summary.json").read_bytes()
    report = (pipeline.out / "eval_report.csv").read_bytes()
    manifest = (pipeline.out / "eval.manifest.json").read_bytes()
    assert main(["eval", "--config", pipeline.cfg]) == 0
    assert (pipeline.out / "eval_summary.json").read_bytes() == summary
    assert (pipeline.out / "eval_report.csv").read_bytes() == report
    assert (pipeline.out / "eval.manifest.json").read_bytes() == manifest


def test_eval_summary_contents(pipeline):
    summary = json.loads((pipeline.out / "eval_summary.json").read_text())
    assert set(summary) == {
        "mean_reward", "sd_reward", "safety_rate", "mean_cost", "per_seed",
    }
    assert len(summary["per_seed"]) == 2
    timing = json.loads((pipeline.out / "eval_timing.json").read_text())
    assert timing["time_per_action"] > 0.0


def test_ablate_zsens(pipeline):
    assert main(["ablate", "zsens", "--config", pipeline.cfg]) == 0
    summary = json.loads((pipeline.out / "zsens_summary.json").read_text())
    assert len(summary["z_grid"]) == 5
    meshes = [p for p in os.listdir(pipeline.out) if p.startswith("zsens_mesh_")]
    assert len(meshes) == 5


def test_ablate_perturb(pipeline):
    assert main(["ablate", "perturb", "--config", pipeline.cfg]) == 0
    lines = (pipeline.out / "ablate_perturb.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header, baseline, one noise level
    assert lines[1].startswith("0.0,")
    assert lines[2].startswith("0.1,")


def test_eval_without_upstream_fails_cleanly(pipeline, capsys):
    empty = pipeline.root / "empty"
    cfg_path = pipeline.root / "empty.ini"
    cfg_path.write_text(TINY_CONFIG.format(out=empty))
    assert main(["eval", "--config", str(cfg_path)]) == 1
    assert "missing value bundle" in capsys.readouterr().err


def test_bad_config_fails_cleanly(tmp_path, capsys):
    cfg_path = tmp_path / "bad.ini"
    cfg_path.write_text("[env]\ngravity = 9.8\n")
    assert main(["gen-data", "--config", str(cfg_path)]) == 1
    assert "unknown config entries" in capsys.readouterr().err


def test_seed_and_out_overrides(pipeline, tmp_path):
    out = tmp_path / "alt"
    assert main(
        ["gen-data", "--config", pipeline.cfg, "--out", str(out), "--seed", "9"]
    ) == 0
    manifest = json.loads((out / "gen-data.manifest.json").read_text())
    assert manifest["seed"] == 9
    assert (out / "dataset.bin").exists()


def test_deterministic_flag_caps_threads(tmp_path, monkeypatch):
    monkeypatch.setenv("OMP_NUM_THREADS", "4")
    monkeypatch.setenv("OPENBLAS_NUM_THREADS", "4")
    monkeypatch.setenv("MKL_NUM_THREADS", "4")
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(TINY_CONFIG.format(out=tmp_path / "out"))
    assert main(["gen-data", "--config", str(cfg_path), "--deterministic"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "1"


def test_threads_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("EPIFLOW_THREADS", "3")
    monkeypatch.setenv("OMP_NUM_THREADS", "4")
    monkeypatch.setenv("OPENBLAS_NUM_THREADS", "4")
    monkeypatch.setenv("MKL_NUM_THREADS", "4")
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(TINY_CONFIG.format(out=tmp_path / "out"))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "3"


def test_oracle_command(tmp_path, capsys):
    mdp_path = tmp_path / "chain.ini"
    mdp_path.write_text(CHAIN_MDP)
    assert main(["oracle", str(mdp_path)]) == 0
    out = capsys.readouterr().out
    assert "feasible sets agree: yes" in out
    assert "max discrepancy" in out


def test_oracle_missing_file(tmp_path, capsys):
    assert main(["oracle", str(tmp_path / "nope.ini")]) == 1
    assert "missing MDP config" in capsys.readouterr().err
