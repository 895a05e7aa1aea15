"""Latency sweep of the chunk execution strategies with the scripted expert as chunk policy.

    python3 demos/smoothing_latency_sweep.py --latencies 0 10 20 40 --episodes 10
"""

import argparse

from kai0.control import SmoothingConfig, Strategy
from kai0.core import Rng
from kai0.env import EnvState, benchmark_config, expert_policy
from kai0.harness.metrics import compute_metrics
from kai0.harness.sim import SimConfig, rollout_many

STRATEGIES = ("sync_hold", "naive_switch", "temporal_ensemble", "chunk_smooth", "prefix_freeze", "chunk_smooth_plus_freeze")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--latencies", type=int, nargs="+", default=[0, 10, 20, 40])
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--K", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    env = benchmark_config(obs_noise_sigma=0.1)

    def chunks(obs, stage, tick):
        return expert_policy(EnvState(tuple(obs), stage, tick), env, K=args.K).actions

    print(f"{'strategy':>26} {'latency':>7} {'SR':>5} {'retry':>6} {'TP':>8} {'jerk':>10}")
    for latency in args.latencies:
        for name in STRATEGIES:
            sim = SimConfig(env=env, smoothing=SmoothingConfig(strategy=Strategy(name)), inference_latency_ticks=latency, K=args.K)
            rep = compute_metrics(rollout_many(chunks, sim, Rng(args.seed), args.episodes), sim)
            print(f"{name:>26} {latency:>7} {rep.SR:>5.2f} {rep.retry_cost:>6.2f} {rep.TP:>8.1f} {rep.boundary_jerk:>10.2e}")


if __name__ == "__main__":
    main()
