"""``kai0`` command line: data generation, training, merging, simulation, matrix runs, plot data.

A run directory holds ``checkpoints/``, ``episodes/``, ``results.jsonl`` and
``plots/``. Checkpoints are a ``.kai0pv`` parameter file plus a ``.json``
sidecar with the policy shape and the environment it was trained for.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import advantage as adv
from .core import Rng, load_episodes, load_params, save_episodes, save_params
from .env import (
    EnvConfig,
    benchmark_config,
    generate_degraded_dataset,
    generate_expert_dataset,
    heuristic_dagger_dataset,
)
from .harness.experiments import BenchConfig, evaluate, policy_init
from .harness.matrix import FIGURES, append_row, emit_plotdata, load_config, run_matrix
from .merge import (
    CheckpointSet,
    PolicyObjective,
    STRATEGIES,
    coefficients,
    merge,
    partition,
    build_validation_splits,
)
from .policy import MLPLayout, PolicyNet, TrainConfig, train

RUN_SUBDIRS = ("checkpoints", "episodes", "plots")
CONTROL_CHOICES = ("sync_hold", "naive_switch", "temporal_ensemble", "chunk_smooth", "prefix_freeze", "chunk_smooth_plus_freeze")


def run_dir(path: str | Path) -> Path:
    root = Path(path)
    for d in RUN_SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    return root


def save_checkpoint(net: PolicyNet, env: EnvConfig, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path).with_suffix(".kai0pv")
    save_params(net.params, path)
    meta = {"K": net.K, "A": net.A, "S": net.S, "stage_input": net.stage_input, "env": env.to_dict(), **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, EnvConfig, dict]:
    path = Path(path)
    params = load_params(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    layout = MLPLayout.from_id(params.layout_id)
    net = PolicyNet(layout, params, meta["K"], meta["A"], meta["S"], meta["stage_input"])
    return net, EnvConfig.from_dict(meta["env"]), meta


def _read_mapping(path: str | Path) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise SystemExit(f"{path}: expected a mapping")
    return raw


def _episodes_in(data_dir: Path) -> dict[str, list]:
    ep_dir = data_dir / "episodes" if (data_dir / "episodes").is_dir() else data_dir
    files = sorted(ep_dir.glob("*.jsonl"))
    if not files:
        raise SystemExit(f"no episode files (*.jsonl) under {ep_dir}")
    return {f.stem: load_episodes(f) for f in files}


def _final_loss(net: PolicyNet) -> str:
    return f", final loss {net.curve[-1][1]:.3e}" if net.curve else ""


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    task = _read_mapping(args.task) if args.task else {}
    unknown = set(task) - {"env", "seed", "expert", "heuristic_dagger", "degraded"}
    if unknown:
        raise SystemExit(f"unknown task keys: {sorted(unknown)}")
    env = benchmark_config(**task.get("env", {}))
    rng = Rng(int(task.get("seed", 0)))
    out = run_dir(args.out)
    counts = {}
    if task.get("expert", 20):
        counts["expert"] = task.get("expert", 20)
        save_episodes(generate_expert_dataset(env, counts["expert"], rng.child("expert")), out / "episodes" / "expert.jsonl")
    if task.get("heuristic_dagger", 0):
        counts["heuristic_dagger"] = task["heuristic_dagger"]
        eps = heuristic_dagger_dataset(env, counts["heuristic_dagger"], rng=rng.child("hdagger"))
        save_episodes(eps, out / "episodes" / "heuristic_dagger.jsonl")
    if task.get("degraded", 0):
        counts["degraded"] = task["degraded"]
        save_episodes(generate_degraded_dataset(env, counts["degraded"], rng.child("degraded")), out / "episodes" / "degraded.jsonl")
    print(json.dumps({"out": str(out), "episodes": counts}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    groups = _episodes_in(data)
    train_groups = [g for g in groups if g in ("expert", "heuristic_dagger", "degraded", "dagger", "augmented")] or list(groups)
    episodes = [e for g in train_groups for e in groups[g]]
    env = episodes[0].env_params
    bench = BenchConfig(env=env, train=TrainConfig(lr=1e-3, steps=args.steps, decay_steps=args.steps, seed=args.seed))
    out = run_dir(args.out or data)
    net0 = policy_init(bench, args.seed)
    if args.subsets:
        experts = groups.get("expert")
        recovery = groups.get("heuristic_dagger") or groups.get("dagger")
        if not experts or not recovery:
            raise SystemExit("--subsets needs expert and heuristic_dagger (or dagger) episode files")
        pool, in_val, ood_val = build_validation_splits(experts, recovery, Rng(args.seed).child("split"))
        (out / "episodes" / "val").mkdir(exist_ok=True)
        save_episodes(in_val, out / "episodes" / "val" / "in.jsonl")
        save_episodes(ood_val, out / "episodes" / "val" / "ood.jsonl")
        for i, subset in enumerate(partition(pool, args.subsets, Rng(args.seed).child("partition"))):
            net = train(net0, subset, None, bench.train)
            p = save_checkpoint(net, env, out / "checkpoints" / f"subset{i}", {"n_episodes": len(subset)})
            print(f"trained {p} on {len(subset)} episodes{_final_loss(net)}")
        return 0
    weights = None
    if args.weights:
        weights = np.load(args.weights)
    elif args.advantage != "none":
        cfg = adv.AdvantageConfig()
        weights, _ = adv.sample_weights(args.advantage, episodes, args.weight_negative, cfg, Rng(args.seed).child("advantage"))
    net = train(net0, episodes, weights, bench.train)
    name = args.name or (f"policy_{args.advantage}" if not args.weights else "policy_weighted")
    p = save_checkpoint(net, env, out / "checkpoints" / name, {"advantage": args.advantage, "n_episodes": len(episodes)})
    print(f"trained {p} on {len(episodes)} episodes{_final_loss(net)}")
    return 0


def cmd_merge(args) -> int:
    ckpts = sorted(Path(args.ckpts).glob("subset*.kai0pv"))
    if len(ckpts) < 2:
        raise SystemExit(f"need at least two subset*.kai0pv checkpoints in {args.ckpts}")
    loaded = [load_checkpoint(c) for c in ckpts]
    nets = [n for n, _, _ in loaded]
    env = loaded[0][1]
    root = Path(args.ckpts).parent
    val_file = root / "episodes" / "val" / f"{args.val}.jsonl"
    if not val_file.exists():
        raise SystemExit(f"validation split {val_file} not found (produced by `kai0 train --subsets`)")
    val = PolicyObjective.from_episodes(nets[0], load_episodes(val_file))
    cs = CheckpointSet([n.params for n in nets], [c.stem for c in ckpts])
    alphas = coefficients(args.strategy, cs, val)
    merged = nets[0].with_params(merge(cs, alphas))
    p = save_checkpoint(merged, env, root / "checkpoints" / f"merged_{args.strategy}_{args.val}", {"alphas": alphas.tolist()})
    report = {"strategy": args.strategy, "val": args.val, "alphas": alphas.tolist(), "val_loss": val.loss(merged.params.values), "ckpt": str(p)}
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    net, env, _ = load_checkpoint(args.ckpt)
    if args.obs_noise is not None:
        env = EnvConfig.from_dict({**env.to_dict(), "obs_noise_sigma": args.obs_noise})
    bench = BenchConfig(env=env, K=net.K, strategy=args.control, latency=args.latency, n_eval=args.episodes)
    rep = evaluate(bench, net, args.seed)
    row = {"ckpt": str(args.ckpt), "control": args.control, "latency": args.latency, "seed": args.seed, "metrics": rep.to_dict()}
    root = Path(args.ckpt).resolve().parent.parent
    if (root / "checkpoints").is_dir():
        append_row(root / "results.jsonl", row)
    print(json.dumps(row["metrics"], sort_keys=True))
    return 0


def cmd_matrix(args) -> int:
    cfg = load_config(args.config)
    root = run_dir(args.run_dir)
    store = Path(args.store) if args.store else root / "results.jsonl"
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    new = run_matrix(cfg, store, log=log)
    print(json.dumps({"store": str(store), "cells": len(cfg.cells()), "new_rows": len(new)}))
    return 0


def cmd_plotdata(args) -> int:
    text = emit_plotdata(args.store, args.figure)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kai0", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate demonstration episodes")
    g.add_argument("--task", help="YAML/JSON task config: env overrides, seed, episode counts")
    g.add_argument("--out", required=True, help="run directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="behaviour-clone a chunk policy")
    t.add_argument("--data", required=True, help="directory with episodes/*.jsonl")
    t.add_argument("--advantage", default="none", choices=adv.VARIANTS)
    t.add_argument("--weights", help=".npy file of per-sample weights (overrides --advantage)")
    t.add_argument("--weight-negative", type=float, default=0.1, help="weight of negative samples")
    t.add_argument("--subsets", type=int, default=0, help="train one checkpoint per disjoint expert subset")
    t.add_argument("--steps", type=int, default=8000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--name", help="checkpoint name")
    t.add_argument("--out", help="run directory (default: the data directory)")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("merge", help="merge subset checkpoints")
    m.add_argument("--ckpts", required=True, help="checkpoints directory holding subset*.kai0pv")
    m.add_argument("--strategy", required=True, choices=STRATEGIES)
    m.add_argument("--val", required=True, choices=("in", "ood"))
    m.set_defaults(fn=cmd_merge)

    s = sub.add_parser("simulate", help="closed-loop evaluation with inference latency")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--control", default="chunk_smooth", choices=CONTROL_CHOICES)
    s.add_argument("--latency", type=int, default=20)
    s.add_argument("--episodes", type=int, default=30)
    s.add_argument("--obs-noise", type=float, help="override observation noise sigma")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_simulate)

    x = sub.add_parser("matrix", help="run an experiment matrix into a JSONL store")
    x.add_argument("--config", required=True, help="YAML or JSON matrix config")
    x.add_argument("--run-dir", default="runs/matrix")
    x.add_argument("--store", help="results store (default: <run-dir>/results.jsonl)")
    x.add_argument("--quiet", action="store_true")
    x.set_defaults(fn=cmd_matrix)

    d = sub.add_parser("plotdata", help="emit tidy CSV for one figure")
    d.add_argument("--store", required=True)
    d.add_argument("--figure", required=True, choices=FIGURES)
    d.add_argument("--out", help="CSV path (default: stdout)")
    d.set_defaults(fn=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, LookupError) as exc:
        print(f"kai0 {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
