import numpy as np
import pytest
from helpers import grid_simplex_optimum

from kai0.core import LayoutMismatchError, ParameterVector, Rng
from kai0.env import EnvConfig, generate_expert_dataset, heuristic_dagger_dataset
from kai0.merge import (
    CheckpointSet,
    GradientTrace,
    GreedyTrace,
    MergeCoefficients,
    QuadraticObjective,
    SimplexError,
    SplitOverlapError,
    build_validation_splits,
    check_disjoint,
    inverse_loss_coefficients,
    merge,
    partition,
    run_model_arithmetic,
    strategy_average,
    strategy_gradient,
    strategy_greedy,
    strategy_inverse_loss,
)
from kai0.policy import TrainConfig, init_policy, policy_layout


def cs_of(*vectors):
    return CheckpointSet([ParameterVector(np.asarray(v, dtype=np.float64), "q") for v in vectors])


def test_merge_examples():
    cs = cs_of([1, 0], [0, 1])
    np.testing.assert_array_equal(merge(cs, [0.5, 0.5]).values, [0.5, 0.5])
    np.testing.assert_array_equal(merge(cs, [1.0, 0.0]).values, [1.0, 0.0])
    same = cs_of([3, -2], [3, -2], [3, -2])
    np.testing.assert_allclose(merge(same, [0.2, 0.3, 0.5]).values, [3, -2], rtol=0, atol=1e-15)


def test_simplex_validation():
    with pytest.raises(SimplexError):
        MergeCoefficients([0.7, 0.7])
    with pytest.raises(SimplexError):
        MergeCoefficients([1.2, -0.2])
    with pytest.raises(SimplexError):
        merge(cs_of([1, 0], [0, 1]), [1.0])


def test_layout_mismatch_rejected():
    with pytest.raises(LayoutMismatchError):
        CheckpointSet([ParameterVector(np.zeros(2), "a"), ParameterVector(np.zeros(2), "b")])


def test_average():
    np.testing.assert_array_equal(strategy_average(cs_of(*[[float(i)] for i in range(4)])).alphas, [0.25] * 4)
    np.testing.assert_array_equal(strategy_average(cs_of([1])).alphas, [1.0])


def test_inverse_loss_formula():
    eps = 1e-8
    w = np.array([1 / (0.1 + eps), 1 / (0.3 + eps)])
    np.testing.assert_allclose(inverse_loss_coefficients([0.1, 0.3], 1, eps).alphas, w / w.sum(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(inverse_loss_coefficients([0.1, 0.3], 1, 1e-15).alphas, [0.75, 0.25], rtol=0, atol=1e-12)
    np.testing.assert_allclose(inverse_loss_coefficients([0.2, 0.2, 0.2]).alphas, [1 / 3] * 3, atol=1e-15)
    assert inverse_loss_coefficients([0.1, 0.3], 50).alphas[0] > 0.999
    assert np.isfinite(inverse_loss_coefficients([1e-300, 1.0], 500).alphas).all()


def test_inverse_loss_strategy_uses_objective():
    cs = cs_of([0.0], [1.0])
    obj = QuadraticObjective([0.0], offset=0.1)  # losses 0.1 and 1.1
    np.testing.assert_allclose(strategy_inverse_loss(cs, obj).alphas, [11 / 12, 1 / 12], atol=1e-9)


def test_gradient_single_checkpoint():
    assert strategy_gradient(cs_of([5.0]), QuadraticObjective([0.0]), iters=3).alphas.tolist() == [1.0]


def test_gradient_moves_towards_minimizer():
    cs = cs_of([1.0, 0.0], [0.0, 1.0])
    trace = GradientTrace()
    strategy_gradient(cs, QuadraticObjective([1.0, 0.0]), iters=10, trace=trace)
    a1 = [a[0] for a in trace.alphas[:11]]
    assert all(b > a for a, b in zip(a1, a1[1:]))


@pytest.mark.parametrize("adaptive", [False, True])
def test_gradient_reaches_interior_optimum(adaptive):
    cs = cs_of([0.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    obj = QuadraticObjective([0.3, 0.25])
    a = strategy_gradient(cs, obj, iters=500, adaptive=adaptive).alphas
    best, _ = grid_simplex_optimum(lambda x: obj.loss(x @ cs.matrix()), 3, 1e-2)
    assert obj.loss(a @ cs.matrix()) <= best + 1e-6


def test_greedy_one_hot_when_only_best_helps():
    cs = cs_of([0.0], [5.0], [-7.0])
    trace = GreedyTrace()
    a = strategy_greedy(cs, QuadraticObjective([0.1]), trace=trace)
    np.testing.assert_array_equal(a.alphas, [1.0, 0.0, 0.0])
    assert trace.selection == [0]


def test_greedy_identical_checkpoints_keep_smallest_soup():
    a = strategy_greedy(cs_of([1.0], [1.0], [1.0]), QuadraticObjective([0.0]))
    np.testing.assert_array_equal(a.alphas, [1.0, 0.0, 0.0])


def test_greedy_losses_non_increasing_and_multiset():
    # {0, 1} improves on {0}; re-offering 0 gives the soup (0, 1, 0) and improves again
    cs = cs_of([0.0], [1.0])
    trace = GreedyTrace()
    obj = QuadraticObjective([0.3])
    a = strategy_greedy(cs, obj, trace=trace)
    assert all(b <= x for x, b in zip(trace.accepted_losses, trace.accepted_losses[1:]))
    assert trace.accepted_losses[-1] <= min(obj.loss([0.0]), obj.loss([1.0]))
    assert trace.selection == [0, 1, 0]
    np.testing.assert_allclose(a.alphas, [2 / 3, 1 / 3])


def test_validation_split_sizes_and_disjointness():
    cfg = EnvConfig()
    experts = generate_expert_dataset(cfg, 100, Rng(0))
    recov = heuristic_dagger_dataset(cfg, 6, rng=Rng(1))
    pool, in_val, ood = build_validation_splits(experts, recov, Rng(2))
    assert len(in_val) == 10 and len(pool) == 90 and len(ood) == 6
    with pytest.raises(SplitOverlapError):
        check_disjoint([pool], [pool[:1]])
    with pytest.raises(ValueError):
        build_validation_splits(experts, experts[:3], Rng(2))


def test_partition_is_disjoint_and_covering():
    items = list(range(23))

    class E:
        def __init__(self, i):
            self.episode_id = str(i)

    eps = [E(i) for i in items]
    parts = partition(eps, 4, Rng(0))
    ids = sorted(int(e.episode_id) for p in parts for e in p)
    assert ids == items and {len(p) for p in parts} <= {5, 6}


def test_run_model_arithmetic_report_on_simplex():
    cfg = EnvConfig()
    K = 5
    net0 = init_policy(policy_layout(cfg.S, K, hidden=(8,)), Rng(0), K, cfg.S, stage_input=True)
    experts = generate_expert_dataset(cfg, 9, Rng(0))
    recov = heuristic_dagger_dataset(cfg, 3, rng=Rng(1))
    pool, _, ood = build_validation_splits(experts, recov, Rng(2))
    subsets = partition(pool, 4, Rng(3))
    merged, report, artifacts = run_model_arithmetic(
        net0, subsets, "greedy", ood, "ood", TrainConfig(steps=30, decay_steps=30)
    )
    a = np.array(report.alphas)
    assert a.min() >= 0 and abs(a.sum() - 1) < 1e-9 and len(a) == 4
    assert merged.layout_id == net0.params.layout_id
    assert report.merged_loss <= min(report.per_ckpt_loss) + 1e-12
    assert set(report.baselines) == {"single_best", "full_data"}
    assert len(artifacts["checkpoints"]) == 4
