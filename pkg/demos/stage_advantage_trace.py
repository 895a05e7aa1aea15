"""Train the staged direct estimator and the value-difference baseline on looped episodes,
then print stability metrics and the cumulative advantage trace of one held-out episode.

    python3 demos/stage_advantage_trace.py --train 20 --out trace.csv
"""

import argparse
from dataclasses import replace

import numpy as np

from kai0.advantage import AdvantageConfig, fit_estimator, per_frame_advantages, stability_metrics, trace_csv
from kai0.core import Rng
from kai0.env import benchmark_config, generate_expert_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=20, help="training episodes")
    ap.add_argument("--steps", type=int, default=2000, help="estimator training steps")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write the staged estimator's trace CSV here")
    args = ap.parse_args()

    env = benchmark_config()
    train_eps = generate_expert_dataset(env, args.train, Rng(args.seed).child("train"))
    test_ep = generate_expert_dataset(env, 1, Rng(args.seed).child("test"))[0]
    base = AdvantageConfig()
    cfg = replace(base, train=replace(base.train, steps=args.steps, decay_steps=args.steps))

    for variant in ("direct_stage", "direct", "value_diff"):
        est = fit_estimator(variant, train_eps, cfg, Rng(args.seed).child(variant))
        a = per_frame_advantages(est, test_ep)
        mstd, sfr = stability_metrics(a)
        print(f"{variant:>12}: MSTD {mstd:.3e}  SFR {sfr:.4f}  cumulative {np.sum(a):+.3f}")
        if variant == "direct_stage" and args.out:
            with open(args.out, "w") as f:
                f.write(trace_csv(est, test_ep))
            print(f"trace written to {args.out}")


if __name__ == "__main__":
    main()
