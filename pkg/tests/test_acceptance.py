"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``-m acceptance``).
The desk-scale reproductions (C4-C8) evaluate 100 episodes per policy over
seeds 0-4 on the benchmark regime fixed in ``ACCEPT_BENCH``.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import finite_difference_errors

from kai0.advantage import advantage_layout, init_advantage, sample_pairs
from kai0.control import ExecutionBuffer, SmoothingConfig, Strategy, boundary_jerk, executor_tick, smooth_swap, swap
from kai0.core import ParameterVector, Rng
from kai0.env import EnvConfig, benchmark_config, generate_expert_dataset
from kai0.harness.experiments import (
    BenchConfig,
    _base_policy,
    clear_caches,
    evaluate,
    exp_advantage,
    exp_data,
    exp_merge,
    exp_stability,
)
from kai0.harness.matrix import store_hash
from kai0.harness.sim import SimConfig, run_episode
from kai0.merge import (
    CheckpointSet,
    GreedyTrace,
    QuadraticObjective,
    inverse_loss_coefficients,
    strategy_gradient,
    strategy_greedy,
    strategy_inverse_loss,
)
from kai0.policy import bc_dataset, init_policy, policy_layout, weighted_sq_loss

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
ACCEPT_BENCH = BenchConfig(n_eval=100)
REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line (uncaptured), then assert."""

    def report(cid: str, ok: bool, detail: str, elapsed: float, limit: float):
        ok = bool(ok) and elapsed <= limit
        with capsys.disabled():
            print(f"\n{cid} {'PASS' if ok else 'FAIL'}: {detail} [{elapsed:.1f}s / limit {limit:.0f}s]")
        assert ok, f"{cid}: {detail} ({elapsed:.1f}s, limit {limit:.0f}s)"

    return report


# ---------------------------------------------------------------------------
# C1 smoothing golden traces and properties


def _col(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def test_c1_smooth_swap_golden_and_properties(verdict):
    t0 = time.perf_counter()
    golden = [
        (smooth_swap(ExecutionBuffer(_col([10, 10, 10]), 2), _col([0] * 5), d_max=5, m_min=2), [10, 5, 0]),
        (smooth_swap(ExecutionBuffer(_col([2]), 0), _col([8] * 4), d_max=5, m_min=3), [2, 5, 8, 8]),
    ]
    ok_golden = all(out.actions.ravel().tolist() == want and out.k == 0 for out, want in golden)
    stale_old = ExecutionBuffer(_col([7, 7]), 6)
    ok_golden &= smooth_swap(stale_old, _col([1] * 4), d_max=5, m_min=5) is stale_old

    rng = np.random.default_rng(0)
    failures = 0
    for _ in range(1000):
        old = rng.uniform(-5, 5, int(rng.integers(1, 12)))
        new = rng.uniform(-5, 5, int(rng.integers(1, 12)))
        k, d_max, m_min = int(rng.integers(0, 15)), int(rng.integers(0, 12)), int(rng.integers(1, 8))
        buf = ExecutionBuffer(_col(old), k)
        out = smooth_swap(buf, _col(new), d_max=d_max, m_min=m_min)
        d = min(k, d_max)
        if d >= len(new):
            # guard: stale update ignored, and ignoring it again changes nothing
            again = smooth_swap(out, _col(new), d_max=d_max, m_min=m_min)
            failures += not (out is buf and again is buf)
            continue
        rem = new[d:]
        prev = np.r_[old, np.repeat(old[-1], max(0, m_min - len(old)))]
        L = min(len(prev), len(rem))
        res = out.actions.ravel()
        ok = len(res) == len(rem) and out.k == 0
        if L >= 2:  # endpoint anchoring
            ok &= res[0] == prev[0] and res[L - 1] == rem[L - 1]
        lo, hi = np.minimum(prev[:L], rem[:L]), np.maximum(prev[:L], rem[:L])  # convexity
        ok &= bool(np.all(res[:L] >= lo - 1e-12) and np.all(res[:L] <= hi + 1e-12))
        ok &= bool(np.array_equal(res[L:], rem[L:]))
        failures += not ok
    verdict("C1", ok_golden and failures == 0, f"golden traces {'ok' if ok_golden else 'WRONG'}, "
            f"{failures}/1000 property trials failed", time.perf_counter() - t0, 1.0)


# ---------------------------------------------------------------------------
# C2 gradient correctness


def test_c2_gradients_match_finite_differences(verdict):
    t0 = time.perf_counter()
    cfg = EnvConfig()
    episodes = generate_expert_dataset(cfg, 2, Rng(0))
    worst = {"policy": 0.0, "advantage": 0.0}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        net = init_policy(policy_layout(cfg.S, 10, hidden=(16, 16)), Rng(seed), 10, cfg.S, stage_input=True)
        data = bc_dataset(episodes, net)
        idx = rng.choice(len(data), 64, replace=False)
        X, Y, w = data.X[idx], data.Y[idx], rng.uniform(0.1, 1.0, 64)
        coords = rng.choice(net.layout.n_params, 100, replace=False)
        errs = finite_difference_errors(lambda th: weighted_sq_loss(net.layout, th, X, Y, w), net.params.values, coords)
        worst["policy"] = max(worst["policy"], errs.max())

        anet = init_advantage(True, Rng(seed), hidden=(16, 16))
        samples = sample_pairs(episodes, 64, True, Rng(seed))
        Xa = anet.features(samples.s, samples.s_prime, samples.g)
        ya = samples.target[:, None]
        layout = advantage_layout(True, (16, 16))
        coords = rng.choice(layout.n_params, 100, replace=False)
        errs = finite_difference_errors(lambda th: weighted_sq_loss(layout, th, Xa, ya), anet.params.values, coords)
        worst["advantage"] = max(worst["advantage"], errs.max())
    ok = max(worst.values()) < 1e-5
    verdict("C2", ok, f"max rel err policy {worst['policy']:.2e}, advantage {worst['advantage']:.2e} "
            "(100 coords x 5 seeds each, tol 1e-5)", time.perf_counter() - t0, 10.0)


# ---------------------------------------------------------------------------
# C3 merge oracles


def grid_optimum(obj: QuadraticObjective, Theta: np.ndarray, step: float = 1e-3) -> float:
    m = int(round(1 / step))
    n = len(Theta)
    if n == 2:
        a = np.arange(m + 1) / m
        A = np.stack([a, 1 - a], axis=1)
    else:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        A = np.stack([i[keep], j[keep], m - i[keep] - j[keep]], axis=1) / m
    R = A @ Theta - obj.center
    return float((np.einsum("ij,jk,ik->i", R, obj.H, R) + obj.offset).min())


def random_problem(rng, n, d=4):
    Theta = rng.normal(size=(n, d))
    M = rng.normal(size=(d, d))
    obj = QuadraticObjective(rng.normal(size=d), M @ M.T / d + 0.1 * np.eye(d), rng.uniform())
    return CheckpointSet([ParameterVector(t, "quad") for t in Theta]), obj, Theta


def test_c3_merge_oracles(verdict):
    t0 = time.perf_counter()
    worst_gap, greedy_bad, inv_err, count = -np.inf, 0, 0.0, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for n in (2, 3):
            cs, obj, Theta = random_problem(rng, n)
            count += 1
            a = strategy_gradient(cs, obj, adaptive=True).alphas
            worst_gap = max(worst_gap, obj.loss(a @ Theta) - grid_optimum(obj, Theta))

            trace = GreedyTrace()
            strategy_greedy(cs, obj, trace=trace)
            losses = trace.accepted_losses
            individual = min(obj.loss(t) for t in Theta)
            greedy_bad += not (all(b <= x for x, b in zip(losses, losses[1:])) and losses[-1] <= individual)

            L = np.array([obj.loss(t) for t in Theta])
            eps = 1e-8
            closed = (1 / (L + eps)) / np.sum(1 / (L + eps))
            inv_err = max(inv_err, np.abs(strategy_inverse_loss(cs, obj, epsilon=eps).alphas - closed).max())
            for p in (0.5, 2.0, 4.0):
                closed_p = (L + eps) ** -p / np.sum((L + eps) ** -p)
                inv_err = max(inv_err, np.abs(inverse_loss_coefficients(L, p, eps).alphas - closed_p).max())
    ok = worst_gap <= 1e-6 and greedy_bad == 0 and inv_err <= 1e-12
    verdict("C3", ok, f"{count} quadratics: gradient - grid optimum max {worst_gap:.2e} (tol 1e-6); "
            f"greedy violations {greedy_bad}; inverse-loss max err {inv_err:.1e} (tol 1e-12)",
            time.perf_counter() - t0, 30.0)


# ---------------------------------------------------------------------------
# C4-C8 desk-scale reproductions


def test_c4_model_arithmetic(verdict):
    t0 = time.perf_counter()
    bench = ACCEPT_BENCH
    labels = ("average", "inverse_loss", "gradient", "greedy")
    sr = {sp: {s: [] for s in labels} for sp in ("in", "ood")}
    wins, greedy_sr, single_sr = 0, [], []
    for seed in SEEDS:
        g = exp_merge(bench, "greedy", "ood", seed)["metrics"]["SR"]
        b = exp_merge(bench, "single_best", "ood", seed)["metrics"]["SR"]
        wins += g >= b
        greedy_sr.append(g)
        single_sr.append(b)
        for sp in sr:
            for s in labels:
                sr[sp][s].append(exp_merge(bench, s, sp, seed)["metrics"]["SR"])
        clear_caches()
    se = {sp: float(np.mean([np.std(v, ddof=1) / np.sqrt(len(v)) for v in sr[sp].values()])) for sp in sr}
    ok = wins >= 4 and se["ood"] <= se["in"]
    verdict("C4", ok, f"greedy-OOD >= single-best in {wins}/5 seeds (greedy {np.round(greedy_sr, 2).tolist()}, "
            f"single {np.round(single_sr, 2).tolist()}); mean SE ood {se['ood']:.4f} vs in {se['in']:.4f}",
            time.perf_counter() - t0, 15 * 60)


def test_c5_stage_advantage_stability(verdict):
    t0 = time.perf_counter()
    rows = [exp_stability(ACCEPT_BENCH, seed) for seed in SEEDS]
    m = {v: {k: float(np.mean([r[v][k] for r in rows])) for k in ("MSTD", "SFR")} for v in ("direct_stage", "value_diff")}
    ok = m["direct_stage"]["MSTD"] < m["value_diff"]["MSTD"] and m["direct_stage"]["SFR"] > m["value_diff"]["SFR"]
    verdict("C5", ok, f"MSTD direct+stage {m['direct_stage']['MSTD']:.3e} vs value-diff {m['value_diff']['MSTD']:.3e}; "
            f"SFR {m['direct_stage']['SFR']:.4f} vs {m['value_diff']['SFR']:.4f}", time.perf_counter() - t0, 5 * 60)


def test_c6_advantage_weighted_bc(verdict):
    t0 = time.perf_counter()
    vanilla = [exp_advantage(ACCEPT_BENCH, "none", seed)["metrics"]["SR"] for seed in SEEDS]
    weighted = [exp_advantage(ACCEPT_BENCH, "direct_stage", seed)["metrics"]["SR"] for seed in SEEDS]
    gap = float(np.mean(weighted) - np.mean(vanilla))
    verdict("C6", gap > 0, f"mean SR weighted {np.mean(weighted):.3f} vs vanilla {np.mean(vanilla):.3f} (gap {gap:+.3f})",
            time.perf_counter() - t0, 10 * 60)


def _swap_jerk(strategy, last, old_plan, new_plan, k):
    """Boundary jerk of one swap: the tick after it compared with the last executed one."""
    cfg = SmoothingConfig(strategy=strategy)
    out = swap(ExecutionBuffer(old_plan, k, last), new_plan, cfg)
    a, _, _ = executor_tick(out)
    return boundary_jerk(np.vstack([last, a]), [1])


def test_c7_control_strategies(verdict):
    t0 = time.perf_counter()
    clip = ACCEPT_BENCH.env.action_clip
    rng = np.random.default_rng(7)
    jerk = {}
    for latency in (20, 40):
        js, jn = [], []
        for _ in range(1000):
            last = rng.uniform(-clip, clip, 2)
            slope_old, slope_new = rng.normal(0, clip / 50, (2, 2))
            old_plan = last + slope_old * np.arange(1, 31)[:, None]
            new_plan = rng.uniform(-clip, clip, 2) + slope_new * np.arange(50)[:, None]
            js.append(_swap_jerk(Strategy.CHUNK_SMOOTH, last, old_plan, new_plan, latency))
            jn.append(_swap_jerk(Strategy.NAIVE_SWITCH, last, old_plan, new_plan, latency))
        jerk[latency] = (float(np.mean(js)), float(np.mean(jn)))
    sr = {}
    for latency in (20, 40):
        for s in ("chunk_smooth", "naive_switch", "chunk_smooth_plus_freeze"):
            sr[s, latency] = [evaluate(ACCEPT_BENCH, _base_policy(ACCEPT_BENCH, seed), seed, s, latency).SR for seed in SEEDS]
    jerk_ok = all(j[0] < j[1] for j in jerk.values())
    sr_ok = all(np.mean(sr["chunk_smooth", L]) >= np.mean(sr["naive_switch", L]) for L in (20, 40))
    freeze_wins = {L: sum(f >= c for f, c in zip(sr["chunk_smooth_plus_freeze", L], sr["chunk_smooth", L])) for L in (20, 40)}
    freeze_ok = all(w >= 3 for w in freeze_wins.values())
    detail = "; ".join(
        f"lat {L}: jerk smooth {jerk[L][0]:.2e} < naive {jerk[L][1]:.2e}, SR smooth {np.mean(sr['chunk_smooth', L]):.3f} "
        f"vs naive {np.mean(sr['naive_switch', L]):.3f}, +freeze >= smooth in {freeze_wins[L]}/5"
        for L in (20, 40)
    )
    verdict("C7", jerk_ok and sr_ok and freeze_ok, detail, time.perf_counter() - t0, 10 * 60)


def test_c8_heuristic_dagger(verdict):
    t0 = time.perf_counter()
    base = [exp_data(ACCEPT_BENCH, "base", seed)["metrics"] for seed in SEEDS]
    hd = [exp_data(ACCEPT_BENCH, "heuristic_dagger", seed)["metrics"] for seed in SEEDS]
    wins = sum(h["SR"] > b["SR"] for h, b in zip(hd, base))
    r_base, r_hd = np.mean([b["retry_cost"] for b in base]), np.mean([h["retry_cost"] for h in hd])
    ok = wins >= 4 and r_hd >= r_base
    verdict("C8", ok, f"SR heuristic-DAgger > base in {wins}/5 seeds (base {[b['SR'] for b in base]}, "
            f"hd {[h['SR'] for h in hd]}); retry cost hd {r_hd:.3f} vs base {r_base:.3f}", time.perf_counter() - t0, 15 * 60)


# ---------------------------------------------------------------------------
# C9 zero-latency equivalence

K9 = 20


def _consistent(obs, stage, tick):
    """Open-loop plan indexed by absolute tick, so every chunk agrees with every other."""
    t = tick + np.arange(K9)
    return 0.4 * benchmark_config().action_clip * np.stack([np.cos(0.021 * t), np.sin(0.017 * t + 0.3)], axis=1)


def test_c9_zero_latency_equivalence(verdict):
    t0 = time.perf_counter()
    env = benchmark_config()
    strategies = (Strategy.NAIVE_SWITCH, Strategy.TEMPORAL_ENSEMBLE, Strategy.CHUNK_SMOOTH,
                  Strategy.PREFIX_FREEZE, Strategy.CHUNK_SMOOTH_PLUS_FREEZE)
    identical = True
    for refill in (None, K9 + 1):
        runs = []
        for s in strategies:
            sim = SimConfig(env=env, smoothing=SmoothingConfig(strategy=s), inference_latency_ticks=0, K=K9,
                            refill_threshold=refill, max_episode_ticks=400)
            ep, _ = run_episode(_consistent, sim, Rng(0))
            runs.append(ep)
        identical &= all(np.array_equal(r.actions, runs[0].actions) and np.array_equal(r.states, runs[0].states)
                         for r in runs[1:])
    verdict("C9", identical, f"{len(strategies)} strategies x 2 refill rules: executed trajectories "
            f"{'bit-identical' if identical else 'DIFFER'}", time.perf_counter() - t0, 5.0)


# ---------------------------------------------------------------------------
# C10 determinism of the default matrix


def test_c10_default_matrix_is_deterministic(verdict, tmp_path):
    t0 = time.perf_counter()
    env = {k: v for k, v in os.environ.items() if k != "KAI0_SEED"}
    hashes = []
    for run in ("a", "b"):
        cmd = [sys.executable, "-m", "kai0.cli", "matrix", "--config", str(REPO / "configs" / "default_matrix.yaml"),
               "--run-dir", str(tmp_path / run), "--quiet"]
        subprocess.run(cmd, check=True, capture_output=True, env=env)
        hashes.append(store_hash(tmp_path / run / "results.jsonl"))
    rows = len((tmp_path / "a" / "results.jsonl").read_text().splitlines())
    verdict("C10", hashes[0] == hashes[1], f"{rows} cells per run; store hashes {hashes[0][:12]} / {hashes[1][:12]}",
            time.perf_counter() - t0, 30 * 60)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
