"""Compare merge strategies on a random quadratic validation surrogate.

    python3 demos/merge_coefficients.py --n 3 --dim 6 --seed 0
"""

import argparse

import numpy as np

from kai0.core import ParameterVector
from kai0.merge import CheckpointSet, GreedyTrace, QuadraticObjective, coefficients, merge, strategy_greedy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3, help="number of checkpoints")
    ap.add_argument("--dim", type=int, default=6, help="parameter dimension")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    thetas = rng.normal(size=(args.n, args.dim))
    M = rng.normal(size=(args.dim, args.dim))
    val = QuadraticObjective(rng.normal(size=args.dim), M @ M.T / args.dim + 0.1 * np.eye(args.dim))
    cs = CheckpointSet([ParameterVector(t, "quad") for t in thetas])

    print("individual losses:", np.round([val.loss(t) for t in thetas], 4))
    for strategy in ("average", "inverse_loss", "gradient", "gradient_adaptive", "greedy"):
        alphas = coefficients(strategy, cs, val)
        loss = val.loss(merge(cs, alphas).values)
        print(f"{strategy:>18}: alphas {np.round(alphas.alphas, 3)}  merged loss {loss:.4f}")

    trace = GreedyTrace()
    strategy_greedy(cs, val, trace=trace)
    print("greedy accepted losses:", np.round(trace.accepted_losses, 4), "selection:", trace.selection)


if __name__ == "__main__":
    main()
