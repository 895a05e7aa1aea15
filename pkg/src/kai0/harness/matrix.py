"""Experiment matrix runner: config loading, cell expansion, JSONL results store, plot data.

Config schema (YAML or JSON; every key optional except ``blocks``)::

    seed: 0                 # top-level seed; the KAI0_SEED env var overrides it
    replicates: [0, 1, 2]   # per-cell replicate ids; cell seed = 1000*seed + replicate
    workers: 1              # process pool size (results are written in cell order)
    bench: {...}            # BenchConfig overrides (env, train, advantage, n_eval, ...)
    blocks:
      - experiment: control # one of data | advantage | merge | control | stability
        axes:               # Cartesian product; names must match the experiment
          strategy: [naive_switch, chunk_smooth]
          latency: [0, 10, 20, 40]

Each cell is keyed by the SHA-256 of its canonical description (experiment,
axis values, seed, full bench config), so reordering fields in the file does
not change it and re-running a completed matrix adds nothing.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from ..core import stable_hash
from .experiments import DATA_VARIANTS, EXPERIMENTS, BenchConfig, run_cell
from .metrics import standard_error

SEED_ENV = "KAI0_SEED"
TOP_KEYS = {"seed", "replicates", "workers", "bench", "blocks"}


class ConfigSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    experiment: str
    params: tuple  # sorted (name, value) pairs
    replicate: int
    seed: int
    bench: BenchConfig

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def describe(self) -> dict:
        return {"experiment": self.experiment, "params": self.param_dict, "seed": self.seed, "bench": self.bench.to_dict()}

    @property
    def key(self) -> str:
        return stable_hash(self.describe())

    @property
    def label(self) -> str:
        axes = ",".join(f"{k}={v}" for k, v in self.params)
        return f"{self.experiment}[{axes}]#{self.replicate}"


@dataclass
class MatrixConfig:
    seed: int
    replicates: list
    workers: int
    bench: BenchConfig
    blocks: list  # (experiment, {axis: [values]})

    def cells(self) -> list[Cell]:
        out = []
        for experiment, axes in self.blocks:
            names = sorted(axes)
            for values in itertools.product(*[axes[n] for n in names]):
                params = tuple(zip(names, values))
                for r in self.replicates:
                    out.append(Cell(experiment, params, int(r), 1000 * self.seed + int(r), self.bench))
        return out


# ---------------------------------------------------------------------------
# config loading with line diagnostics


def _line_index(text: str) -> dict:
    """Map key paths (tuples) to 1-based source lines, from the YAML node tree."""
    lines = {}

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                walk(v, path + (k.value,))
                lines[path + (k.value,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, ())
    return lines


def _fail(lines: dict, path: tuple, msg: str):
    where = ".".join(str(p) for p in path) or "<root>"
    line = lines.get(path)
    loc = f"line {line}, " if line else ""
    raise ConfigSchemaError(f"{loc}field {where}: {msg}")


def parse_config(raw: dict, lines: dict | None = None, env: dict | None = None) -> MatrixConfig:
    lines = lines or {}
    env = os.environ if env is None else env
    if not isinstance(raw, dict):
        _fail(lines, (), "config must be a mapping")
    for k in raw:
        if k not in TOP_KEYS:
            _fail(lines, (k,), f"unknown key; expected one of {sorted(TOP_KEYS)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _fail(lines, ("seed",), "must be a non-negative integer")
    if env.get(SEED_ENV, "") != "":
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigSchemaError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    reps = raw.get("replicates", [0])
    if not isinstance(reps, list) or not reps or not all(isinstance(r, int) and r >= 0 for r in reps):
        _fail(lines, ("replicates",), "must be a nonempty list of non-negative integers")
    if len(set(reps)) != len(reps):
        _fail(lines, ("replicates",), "replicate ids must be distinct")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        _fail(lines, ("workers",), "must be a positive integer")
    try:
        bench = BenchConfig.from_dict(raw.get("bench") or {})
    except (TypeError, ValueError) as exc:
        _fail(lines, ("bench",), str(exc))
    blocks_raw = raw.get("blocks")
    if not isinstance(blocks_raw, list) or not blocks_raw:
        _fail(lines, ("blocks",), "must be a nonempty list of experiment blocks")
    blocks = []
    for i, b in enumerate(blocks_raw):
        if not isinstance(b, dict):
            _fail(lines, ("blocks", i), "block must be a mapping with 'experiment' and 'axes'")
        extra = set(b) - {"experiment", "axes"}
        if extra:
            _fail(lines, ("blocks", i, sorted(extra)[0]), "unknown block key")
        exp = b.get("experiment")
        if exp not in EXPERIMENTS:
            _fail(lines, ("blocks", i, "experiment"), f"unknown experiment {exp!r}; choose from {sorted(EXPERIMENTS)}")
        axes = b.get("axes") or {}
        if not isinstance(axes, dict):
            _fail(lines, ("blocks", i, "axes"), "must be a mapping of axis name to value list")
        want = set(EXPERIMENTS[exp][1])
        if set(axes) != want:
            _fail(lines, ("blocks", i, "axes"), f"experiment {exp!r} needs axes {sorted(want)}, got {sorted(axes)}")
        for name, values in axes.items():
            if not isinstance(values, list) or not values:
                _fail(lines, ("blocks", i, "axes", name), "must be a nonempty list")
        blocks.append((exp, {k: list(v) for k, v in axes.items()}))
    return MatrixConfig(seed, list(reps), workers, bench, blocks)


def load_config(path: str | Path, env: dict | None = None) -> MatrixConfig:
    """Load a YAML or JSON matrix config (JSON parses as YAML)."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigSchemaError(f"{path}: not valid YAML/JSON: {exc}") from None
    return parse_config(raw, _line_index(text), env)


def default_matrix_dict() -> dict:
    """The shipped default matrix: every experiment family at reduced evaluation scale."""
    return {
        "seed": 0,
        "replicates": [0, 1],
        "bench": {"n_eval": 20, "subset_size": 25, "n_ood": 20},
        "blocks": [
            {"experiment": "data", "axes": {"variant": list(DATA_VARIANTS)}},
            {"experiment": "advantage", "axes": {"variant": ["none", "value_diff", "direct", "direct_stage"]}},
            {
                "experiment": "merge",
                "axes": {
                    "strategy": ["average", "inverse_loss", "gradient", "greedy", "single_best", "full_data"],
                    "split": ["in", "ood"],
                },
            },
            {
                "experiment": "control",
                "axes": {
                    "strategy": ["naive_switch", "temporal_ensemble", "chunk_smooth", "prefix_freeze", "chunk_smooth_plus_freeze"],
                    "latency": [0, 10, 20, 40],
                },
            },
            {"experiment": "stability", "axes": {}},
        ],
    }


# ---------------------------------------------------------------------------
# results store


def read_store(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    rows = []
    for i, line in enumerate(p.read_text().splitlines()):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                raise ValueError(f"{p}:{i + 1}: corrupt result row") from None
    return rows


def _row_line(row: dict) -> str:
    return json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n"


def append_row(path: str | Path, row: dict) -> None:
    """Append one row as a single write, flushed and fsynced."""
    with open(path, "a") as f:
        f.write(_row_line(row))
        f.flush()
        os.fsync(f.fileno())


def _run(cell: Cell) -> dict:
    return run_cell(cell.bench, cell.experiment, cell.param_dict, cell.seed)


def cell_rows(store: str | Path) -> list[dict]:
    """Matrix rows of a store; ad-hoc rows (e.g. from ``kai0 simulate``) are skipped."""
    return [r for r in read_store(store) if "cell" in r and "experiment" in r]


def run_matrix(config: MatrixConfig, store: str | Path, log=None) -> list[dict]:
    """Run every cell not yet in ``store``; returns the rows appended by this call."""
    Path(store).parent.mkdir(parents=True, exist_ok=True)
    done = {r["cell"] for r in cell_rows(store)}
    pending = [c for c in config.cells() if c.key not in done]
    new_rows = []
    if config.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = pool.map(_run, pending)
            pairs = zip(pending, results)
            new_rows = [_store(store, c, res, log) for c, res in pairs]
    else:
        new_rows = [_store(store, c, _run(c), log) for c in pending]
    return new_rows


def _store(store, cell: Cell, result: dict, log) -> dict:
    row = {
        "cell": cell.key,
        "experiment": cell.experiment,
        "params": cell.param_dict,
        "replicate": cell.replicate,
        "seed": cell.seed,
        "result": result,
    }
    append_row(store, row)
    if log is not None:
        log(f"done {cell.label}")
    return row


def store_hash(path: str | Path) -> str:
    """Order-independent hash of the store contents (sorted canonical rows)."""
    return stable_hash(sorted(_row_line(r) for r in read_store(path)))


# ---------------------------------------------------------------------------
# plot data

METRIC_COLUMNS = {"SR": "SR", "TP": "TP", "retry": "retry_cost", "score": "score"}
CONTROL_STRATEGIES = ("naive_switch", "temporal_ensemble", "chunk_smooth", "prefix_freeze", "chunk_smooth_plus_freeze")


def _figure_cells(figure: str, rows: Sequence[dict]) -> tuple[str, list[tuple[str, dict]], tuple]:
    """(experiment, [(cell name, params)], metric names) required by a figure."""
    if figure == "ma":
        labels = ("average", "inverse_loss", "gradient", "greedy", "single_best", "full_data")
        cells = [(f"{s}/{sp}", {"strategy": s, "split": sp}) for sp in ("ood", "in") for s in labels]
        return "merge", cells, tuple(METRIC_COLUMNS)
    if figure == "sa":
        cells = [(v, {"variant": v}) for v in ("none", "value_diff", "direct", "direct_stage")]
        return "advantage", cells, tuple(METRIC_COLUMNS)
    if figure == "dagger":
        cells = [(v, {"variant": v}) for v in ("base", "heuristic_dagger", "dagger")]
        return "data", cells, tuple(METRIC_COLUMNS)
    if figure == "augmentation":
        cells = [(v, {"variant": v}) for v in ("base", "augmentation")]
        return "data", cells, tuple(METRIC_COLUMNS)
    if figure == "control":
        lats = sorted({r["params"]["latency"] for r in rows if r["experiment"] == "control"}) or [20]
        cells = [(f"{s}@{lat}", {"strategy": s, "latency": lat}) for lat in lats for s in CONTROL_STRATEGIES]
        return "control", cells, tuple(METRIC_COLUMNS) + ("boundary_jerk",)
    if figure == "stability":
        return "stability", [("stability", {})], ("MSTD", "SFR")
    raise ValueError(f"unknown figure {figure!r}; choose from {FIGURES}")


FIGURES = ("ma", "sa", "dagger", "augmentation", "control", "stability")


class MissingCellsError(LookupError):
    pass


def emit_plotdata(store: str | Path, figure: str) -> str:
    """Tidy CSV text: one row per (cell, metric) with mean and standard error over replicates."""
    rows = cell_rows(store)
    experiment, cells, metrics = _figure_cells(figure, rows)
    groups = {}
    for name, params in cells:
        groups[name] = [r for r in rows if r["experiment"] == experiment and r["params"] == params]
    missing = [f"{experiment}[{name}]" for name, g in groups.items() if not g]
    if missing:
        raise MissingCellsError(f"figure {figure!r} is missing cells: {', '.join(missing)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["figure", "cell", "metric", "mean", "se", "n"])
    for name, _ in cells:
        g = sorted(groups[name], key=lambda r: r["seed"])
        if experiment == "stability":
            for est in ("direct_stage", "direct", "value_diff"):
                for m in metrics:
                    vals = [r["result"][est][m] for r in g]
                    w.writerow([figure, est, m, _fmt(np.mean(vals)), _fmt(standard_error(vals)), len(vals)])
            continue
        for m in metrics:
            vals = [r["result"]["metrics"][METRIC_COLUMNS.get(m, m)] for r in g]
            w.writerow([figure, name, m, _fmt(np.mean(vals)), _fmt(standard_error(vals)), len(vals)])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))
