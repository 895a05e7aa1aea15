import json

import numpy as np
import pytest

from kai0.cli import load_checkpoint, main
from kai0.core import load_episodes


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    task = root / "task.yaml"
    task.write_text("seed: 1\nexpert: 8\nheuristic_dagger: 3\ndegraded: 2\n")
    assert main(["gen-data", "--task", str(task), "--out", str(root)]) == 0
    return root


def test_gen_data_layout(run):
    for name, n in (("expert", 8), ("heuristic_dagger", 3), ("degraded", 2)):
        assert len(load_episodes(run / "episodes" / f"{name}.jsonl")) == n
    assert (run / "checkpoints").is_dir() and (run / "plots").is_dir()


def test_train_and_simulate(run, capsys):
    assert main(["train", "--data", str(run), "--steps", "20", "--name", "p"]) == 0
    net, env, meta = load_checkpoint(run / "checkpoints" / "p.kai0pv")
    assert meta["n_episodes"] == 13 and net.K == 50
    capsys.readouterr()
    assert main(["simulate", "--ckpt", str(run / "checkpoints" / "p.kai0pv"), "--episodes", "2", "--latency", "10"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["SR"] <= 1.0 and metrics["n_episodes"] == 2
    rows = [json.loads(line) for line in (run / "results.jsonl").read_text().splitlines()]
    assert rows[-1]["latency"] == 10


def test_train_with_weight_file(run, tmp_path):
    n = sum(e.T for name in ("expert", "heuristic_dagger", "degraded") for e in load_episodes(run / "episodes" / f"{name}.jsonl"))
    w = tmp_path / "w.npy"
    np.save(w, np.ones(n))
    assert main(["train", "--data", str(run), "--steps", "5", "--weights", str(w)]) == 0
    assert (run / "checkpoints" / "policy_weighted.kai0pv").exists()


def test_subsets_then_merge(run, capsys):
    assert main(["train", "--data", str(run), "--steps", "10", "--subsets", "2", "--seed", "1"]) == 0
    assert (run / "episodes" / "val" / "ood.jsonl").exists()
    capsys.readouterr()
    assert main(["merge", "--ckpts", str(run / "checkpoints"), "--strategy", "greedy", "--val", "ood"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert abs(sum(report["alphas"]) - 1) < 1e-9 and len(report["alphas"]) == 2
    assert (run / "checkpoints" / "merged_greedy_ood.kai0pv").exists()


def test_matrix_and_plotdata(tmp_path, capsys):
    cfg = tmp_path / "m.yaml"
    cfg.write_text(
        "replicates: [0]\n"
        "bench: {K: 10, hidden: [8], train: {steps: 10, decay_steps: 10}, n_eval: 1, n_expert: 2}\n"
        "blocks:\n"
        "  - experiment: control\n"
        "    axes: {strategy: [naive_switch, temporal_ensemble, chunk_smooth, prefix_freeze,"
        " chunk_smooth_plus_freeze], latency: [0]}\n"
    )
    store = tmp_path / "r" / "results.jsonl"
    assert main(["matrix", "--config", str(cfg), "--run-dir", str(tmp_path / "r"), "--quiet"]) == 0
    assert json.loads(capsys.readouterr().out)["new_rows"] == 5
    assert main(["matrix", "--config", str(cfg), "--run-dir", str(tmp_path / "r"), "--quiet"]) == 0
    assert json.loads(capsys.readouterr().out)["new_rows"] == 0
    out = tmp_path / "control.csv"
    assert main(["plotdata", "--store", str(store), "--figure", "control", "--out", str(out)]) == 0
    assert out.read_text().startswith("figure,cell,metric,mean,se,n\n")
    assert main(["plotdata", "--store", str(store), "--figure", "ma"]) == 2
    assert "missing cells" in capsys.readouterr().err


def test_bad_matrix_config_reports_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("seed: x\nblocks: []\n")
    assert main(["matrix", "--config", str(cfg), "--run-dir", str(tmp_path)]) == 2
    assert "line 1, field seed" in capsys.readouterr().err
