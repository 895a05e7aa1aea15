import json

import pytest

from kai0.harness.experiments import BenchConfig, clear_caches
from kai0.harness.matrix import (
    FIGURES,
    ConfigSchemaError,
    MissingCellsError,
    default_matrix_dict,
    emit_plotdata,
    load_config,
    parse_config,
    read_store,
    run_matrix,
    store_hash,
)

TINY_BENCH = {
    "K": 10,
    "hidden": [8],
    "train": {"steps": 30, "decay_steps": 30},
    "n_eval": 2,
    "n_expert": 2,
}

TINY_YAML = """\
seed: 3
replicates: [0, 1, 2]
bench:
  K: 10
  hidden: [8]
  train: {steps: 30, decay_steps: 30}
  n_eval: 2
  n_expert: 2
blocks:
  - experiment: control
    axes:
      strategy: [naive_switch, chunk_smooth]
      latency: [0, 10]
"""

REORDERED_YAML = """\
blocks:
  - axes:
      latency: [0, 10]
      strategy: [naive_switch, chunk_smooth]
    experiment: control
bench:
  n_expert: 2
  n_eval: 2
  train: {decay_steps: 30, steps: 30}
  hidden: [8]
  K: 10
replicates: [0, 1, 2]
seed: 3
"""


@pytest.fixture(autouse=True)
def fresh_caches():
    clear_caches()
    yield
    clear_caches()


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_two_by_two_by_three_gives_twelve_rows_and_rerun_adds_none(tmp_path):
    cfg = load_config(write(tmp_path, "m.yaml", TINY_YAML), env={})
    store = tmp_path / "store.jsonl"
    rows = run_matrix(cfg, store)
    assert len(rows) == 12 and len(read_store(store)) == 12
    assert {r["seed"] for r in rows} == {3000, 3001, 3002}
    assert run_matrix(cfg, store) == []
    assert len(read_store(store)) == 12


def test_cell_keys_stable_under_field_reordering(tmp_path):
    a = load_config(write(tmp_path, "a.yaml", TINY_YAML), env={})
    b = load_config(write(tmp_path, "b.yaml", REORDERED_YAML), env={})
    assert sorted(c.key for c in a.cells()) == sorted(c.key for c in b.cells())
    j = load_config(write(tmp_path, "c.json", json.dumps({"seed": 3, "replicates": [0, 1, 2], "bench": TINY_BENCH,
                                                          "blocks": [{"experiment": "control", "axes": {
                                                              "latency": [0, 10],
                                                              "strategy": ["naive_switch", "chunk_smooth"]}}]})), env={})
    assert sorted(c.key for c in a.cells()) == sorted(c.key for c in j.cells())


def test_seed_env_override(tmp_path):
    p = write(tmp_path, "m.yaml", TINY_YAML)
    assert {c.seed for c in load_config(p, env={"KAI0_SEED": "7"}).cells()} == {7000, 7001, 7002}
    with pytest.raises(ConfigSchemaError):
        load_config(p, env={"KAI0_SEED": "x"})


def test_store_hash_and_result_determinism(tmp_path):
    cfg = load_config(write(tmp_path, "m.yaml", TINY_YAML), env={})
    run_matrix(cfg, tmp_path / "a.jsonl")
    clear_caches()
    run_matrix(cfg, tmp_path / "b.jsonl")
    assert store_hash(tmp_path / "a.jsonl") == store_hash(tmp_path / "b.jsonl")
    # order independence: the same rows written in reverse hash identically
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    (tmp_path / "r.jsonl").write_text("\n".join(reversed(lines)) + "\n")
    assert store_hash(tmp_path / "r.jsonl") == store_hash(tmp_path / "a.jsonl")


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("blocks: []\n", "field blocks"),
        ("seed: -1\nblocks: [{experiment: control, axes: {strategy: [a], latency: [0]}}]\n", "line 1, field seed"),
        ("bogus: 1\nblocks: []\n", "line 1, field bogus"),
        ("blocks:\n  - experiment: nope\n    axes: {}\n", "line 2, field blocks.0.experiment"),
        ("blocks:\n  - experiment: control\n    axes: {strategy: [a]}\n", "line 3, field blocks.0.axes"),
        ("bench: {n_evals: 3}\nblocks:\n  - experiment: stability\n    axes: {}\n", "line 1, field bench"),
        ("replicates: [0, 0]\nblocks:\n  - experiment: stability\n    axes: {}\n", "field replicates"),
    ],
)
def test_schema_errors_name_line_and_field(tmp_path, text, fragment):
    with pytest.raises(ConfigSchemaError, match=fragment.replace(".", r"\.")):
        load_config(write(tmp_path, "bad.yaml", text), env={})


def test_default_matrix_parses_and_covers_all_figures():
    cfg = parse_config(default_matrix_dict(), env={})
    exps = {c.experiment for c in cfg.cells()}
    assert exps == {"data", "advantage", "merge", "control", "stability"}
    assert len({c.key for c in cfg.cells()}) == len(cfg.cells())


def test_plotdata_missing_cells_listed(tmp_path):
    empty = tmp_path / "empty.jsonl"
    with pytest.raises(MissingCellsError) as exc:
        emit_plotdata(empty, "ma")
    for s in ("average", "inverse_loss", "gradient", "greedy", "single_best", "full_data"):
        assert f"merge[{s}/ood]" in str(exc.value)
    with pytest.raises(ValueError):
        emit_plotdata(empty, "nope")
    assert "ma" in FIGURES


def test_plotdata_control_csv_is_tidy_and_reproducible(tmp_path):
    text = TINY_YAML.replace("[naive_switch, chunk_smooth]",
                             "[naive_switch, temporal_ensemble, chunk_smooth, prefix_freeze, chunk_smooth_plus_freeze]")
    text = text.replace("[0, 1, 2]", "[0, 1]").replace("[0, 10]", "[10]")
    store = tmp_path / "s.jsonl"
    run_matrix(load_config(write(tmp_path, "m.yaml", text), env={}), store)
    first = emit_plotdata(store, "control")
    assert first == emit_plotdata(store, "control")
    lines = first.splitlines()
    assert lines[0] == "figure,cell,metric,mean,se,n"
    assert len(lines) == 1 + 5 * 5
    assert all(line.endswith(",2") for line in lines[1:])
    assert "control,chunk_smooth@10,boundary_jerk," in first


def test_store_shared_with_simulate_rows(tmp_path):
    store = tmp_path / "results.jsonl"
    store.write_text('{"ckpt": "p.kai0pv", "control": "chunk_smooth", "latency": 20, "metrics": {"SR": 1.0}}\n')
    text = TINY_YAML.replace("[naive_switch, chunk_smooth]",
                             "[naive_switch, temporal_ensemble, chunk_smooth, prefix_freeze, chunk_smooth_plus_freeze]")
    cfg = load_config(write(tmp_path, "m.yaml", text.replace("[0, 1, 2]", "[0]").replace("[0, 10]", "[0]")), env={})
    assert len(run_matrix(cfg, store)) == 5
    assert emit_plotdata(store, "control").startswith("figure,cell,metric,mean,se,n\n")
    assert len(read_store(store)) == 6


def test_bench_roundtrip():
    b = BenchConfig.from_dict(TINY_BENCH)
    assert BenchConfig.from_dict(b.to_dict()) == b
    hash(b)
