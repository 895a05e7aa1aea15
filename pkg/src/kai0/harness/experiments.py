"""Desk-scale experiments: data variants, advantage weighting, model arithmetic, control, stability.

Every experiment is a pure function of a ``BenchConfig`` and an integer seed and
returns a JSON-ready dict, so the matrix runner can hash, cache and store it.
Evaluation rollouts for a seed always start from the same initial states
(``Rng(seed).child("eval")``), so variants are compared on common episodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .. import advantage as adv
from ..control import SmoothingConfig, Strategy
from ..core import Episode, Rng, stable_hash
from ..env import (
    EnvConfig,
    augment_frameskip,
    benchmark_config,
    dagger_dataset,
    generate_degraded_dataset,
    generate_expert_dataset,
    heuristic_dagger_dataset,
)
from ..merge import (
    CheckpointSet,
    PolicyObjective,
    build_validation_splits,
    checkpoint_losses,
    coefficients,
    merge,
    partition,
    single_best_index,
)
from ..policy import ActionChunk, PolicyNet, TrainConfig, init_policy, policy_layout, train
from .metrics import MetricsReport, compute_metrics
from .sim import NetPolicy, SimConfig, rollout_many

DATA_VARIANTS = ("base", "heuristic_dagger", "dagger", "augmentation")
MERGE_LABELS = ("average", "inverse_loss", "gradient", "gradient_adaptive", "greedy", "single_best", "full_data")
SPLITS = ("in", "ood")


@dataclass(frozen=True)
class BenchConfig:
    """Everything an experiment cell depends on besides its own axes and seed."""

    env: EnvConfig = field(default_factory=lambda: benchmark_config(obs_noise_sigma=0.1))
    K: int = 50
    hidden: tuple = (64, 64)
    stage_input: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    strategy: str = "chunk_smooth"
    latency: int = 20
    d_max: int = 10
    m_min: int = 5
    refill: int | None = None  # request inference when residual < refill (default K // 2)
    n_eval: int = 30
    n_expert: int = 20  # base demonstrations
    n_recovery: int = 20  # heuristic-DAgger / DAgger episodes added by the data variants
    frameskip_prob: float = 0.2
    # advantage-weighting experiment
    n_mixed: int = 50
    degraded_fraction: float = 0.3
    advantage: adv.AdvantageConfig = field(default_factory=adv.AdvantageConfig)
    # model arithmetic
    n_subsets: int = 4
    subset_size: int = 50
    n_ood: int = 30

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        Strategy(self.strategy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"] = self.env.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        base = cls()
        if "env" in d:
            env = base.env.to_dict()
            env.update(d.pop("env"))
            d["env"] = EnvConfig.from_dict(env)
        if "train" in d:
            d["train"] = replace(base.train, **d.pop("train"))
        if "advantage" in d:
            a = dict(d.pop("advantage"))
            tr = replace(base.advantage.train, **a.pop("train", {}))
            if "hidden" in a:
                a["hidden"] = tuple(a["hidden"])
            d["advantage"] = replace(base.advantage, train=tr, **a)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown bench fields: {sorted(unknown)}")
        return replace(base, **d)

    @property
    def key(self) -> str:
        return stable_hash(self.to_dict())

    def sim(self, strategy: str | None = None, latency: int | None = None) -> SimConfig:
        return SimConfig(
            env=self.env,
            smoothing=SmoothingConfig(d_max=self.d_max, m_min=self.m_min, strategy=strategy or self.strategy),
            inference_latency_ticks=self.latency if latency is None else latency,
            K=self.K,
            refill_threshold=self.refill,
        )


# ---------------------------------------------------------------------------
# building blocks


def policy_init(bench: BenchConfig, seed: int) -> PolicyNet:
    layout = policy_layout(bench.env.S, bench.K, hidden=bench.hidden, scale=bench.env.action_clip)
    return init_policy(layout, Rng(seed).child("policy-init"), bench.K, bench.env.S, stage_input=bench.stage_input)


def fit_policy(bench: BenchConfig, episodes: Sequence[Episode], seed: int, weights=None, net0: PolicyNet | None = None) -> PolicyNet:
    net0 = net0 or policy_init(bench, seed)
    return train(net0, list(episodes), weights, replace(bench.train, seed=seed))


def evaluate(
    bench: BenchConfig, net: PolicyNet, seed: int, strategy: str | None = None, latency: int | None = None, estimator=None
) -> MetricsReport:
    sim = bench.sim(strategy, latency)
    results = rollout_many(NetPolicy(net), sim, Rng(seed).child("eval"), bench.n_eval)
    return compute_metrics(results, sim, estimator=estimator)


def chunk_policy(net: PolicyNet):
    """EnvState -> ActionChunk adapter used by DAgger rollouts."""

    def act(s) -> ActionChunk:
        return ActionChunk(net.predict(s.p[None], [s.g])[0], produced_at_tick=s.t)

    return act


def expert_episodes(bench: BenchConfig, n: int, seed: int, tag: str = "expert") -> list[Episode]:
    return generate_expert_dataset(bench.env, n, Rng(seed).child("data", tag), tag=tag)


@lru_cache(maxsize=16)
def _base_policy(bench: BenchConfig, seed: int) -> PolicyNet:
    return fit_policy(bench, expert_episodes(bench, bench.n_expert, seed), seed)


def data_variant(bench: BenchConfig, variant: str, seed: int) -> list[Episode]:
    """Training episodes for one data variant (the base demonstrations plus extras)."""
    base = expert_episodes(bench, bench.n_expert, seed)
    r = Rng(seed).child("variant", variant)
    if variant == "base":
        return base
    if variant == "heuristic_dagger":
        return base + heuristic_dagger_dataset(bench.env, bench.n_recovery, rng=r)
    if variant == "dagger":
        rolled = dagger_dataset(chunk_policy(_base_policy(bench, seed)), bench.env, bench.n_recovery, rng=r)
        return base + rolled
    if variant == "augmentation":
        return base + [augment_frameskip(e, bench.frameskip_prob, r.child(i)) for i, e in enumerate(base)]
    raise ValueError(f"unknown data variant {variant!r}; choose from {DATA_VARIANTS}")


# ---------------------------------------------------------------------------
# experiments


def exp_data(bench: BenchConfig, variant: str, seed: int) -> dict:
    eps = data_variant(bench, variant, seed)
    net = _base_policy(bench, seed) if variant == "base" else fit_policy(bench, eps, seed)
    rep = evaluate(bench, net, seed)
    return {"metrics": rep.to_dict(), "n_train_episodes": len(eps)}


def mixed_dataset(bench: BenchConfig, seed: int) -> list[Episode]:
    n_bad = int(round(bench.degraded_fraction * bench.n_mixed))
    good = expert_episodes(bench, bench.n_mixed - n_bad, seed, tag="mixed-expert")
    bad = generate_degraded_dataset(bench.env, n_bad, Rng(seed).child("data", "degraded"))
    return good + bad


def exp_advantage(bench: BenchConfig, variant: str, seed: int) -> dict:
    eps = mixed_dataset(bench, seed)
    weights, est = adv.sample_weights(
        variant, eps, bench.train.weight_negative, bench.advantage, Rng(seed).child("advantage", variant)
    )
    net = fit_policy(bench, eps, seed, weights)
    rep = evaluate(bench, net, seed)
    out = {"metrics": rep.to_dict()}
    if weights is not None:
        prov = np.concatenate([[e.provenance.value] * e.T for e in eps if e.T > 0])
        pos = weights == 1.0
        out["positive_fraction_expert"] = float(pos[prov == "expert"].mean())
        out["positive_fraction_degraded"] = float(pos[prov == "degraded"].mean())
    return out


@lru_cache(maxsize=4)
def _ma_setup(bench: BenchConfig, seed: int):
    """Subsets, validation objectives and trained checkpoints for one seed."""
    pool_size = bench.n_subsets * bench.subset_size
    n_total = int(np.ceil(pool_size / 0.9))
    experts = expert_episodes(bench, n_total, seed, tag="ma-expert")
    ood = heuristic_dagger_dataset(bench.env, bench.n_ood, rng=Rng(seed).child("data", "ma-ood"))
    pool, in_val, ood_val = build_validation_splits(experts, ood, Rng(seed).child("split"))
    pool = pool[:pool_size]
    subsets = partition(pool, bench.n_subsets, Rng(seed).child("partition"))
    net0 = policy_init(bench, seed)
    nets = [fit_policy(bench, s, seed, net0=net0) for s in subsets]
    full = fit_policy(bench, pool, seed, net0=net0)
    cs = CheckpointSet([n.params for n in nets], [f"subset{i}" for i in range(len(nets))])
    vals = {"in": PolicyObjective.from_episodes(net0, in_val), "ood": PolicyObjective.from_episodes(net0, ood_val)}
    return net0, nets, full, cs, vals


def merged_policy(bench: BenchConfig, label: str, split: str, seed: int) -> tuple[PolicyNet, dict]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    net0, nets, full, cs, vals = _ma_setup(bench, seed)
    val = vals[split]
    losses = checkpoint_losses(cs, val)
    info = {"per_ckpt_loss": [float(x) for x in losses]}
    if label == "full_data":
        info["val_loss"] = val.loss(full.params.values)
        return full, info
    if label == "single_best":
        i = single_best_index(losses)
        info.update(index=i, val_loss=float(losses[i]))
        return nets[i], info
    alphas = coefficients(label, cs, val)
    params = merge(cs, alphas)
    info.update(alphas=alphas.tolist(), val_loss=val.loss(params.values))
    return net0.with_params(params), info


def exp_merge(bench: BenchConfig, strategy: str, split: str, seed: int) -> dict:
    if strategy not in MERGE_LABELS:
        raise ValueError(f"unknown merge label {strategy!r}; choose from {MERGE_LABELS}")
    net, info = merged_policy(bench, strategy, split, seed)
    rep = evaluate(bench, net, seed)
    return {"metrics": rep.to_dict(), **info}


def exp_control(bench: BenchConfig, strategy: str, latency: int, seed: int) -> dict:
    net = _base_policy(bench, seed)
    rep = evaluate(bench, net, seed, strategy=strategy, latency=latency)
    return {"metrics": rep.to_dict()}


def looped_episodes(bench: BenchConfig, n: int, seed: int) -> list[Episode]:
    """Expert episodes on the default looped waypoint set (positions recur across stages)."""
    return expert_episodes(bench, n, seed, tag="looped")


def exp_stability(bench: BenchConfig, seed: int, n_train: int = 40, n_eval: int = 10) -> dict:
    """MSTD/SFR of per-frame advantages: staged direct estimator vs value difference."""
    train_eps = looped_episodes(bench, n_train, seed)
    test_eps = expert_episodes(bench, n_eval, seed, tag="looped-test")
    out = {}
    for variant in ("direct_stage", "direct", "value_diff"):
        est = adv.fit_estimator(variant, train_eps, bench.advantage, Rng(seed).child("stability", variant))
        vals = [adv.stability_metrics(adv.per_frame_advantages(est, e)) for e in test_eps]
        out[variant] = {"MSTD": float(np.mean([v[0] for v in vals])), "SFR": float(np.mean([v[1] for v in vals]))}
    return out


EXPERIMENTS = {
    "data": (exp_data, ("variant",)),
    "advantage": (exp_advantage, ("variant",)),
    "merge": (exp_merge, ("strategy", "split")),
    "control": (exp_control, ("strategy", "latency")),
    "stability": (exp_stability, ()),
}


def run_cell(bench: BenchConfig, experiment: str, params: dict, seed: int) -> dict:
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {sorted(EXPERIMENTS)}")
    fn, names = EXPERIMENTS[experiment]
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise ValueError(f"experiment {experiment!r} takes axes {list(names)}; got {sorted(params)}")
    return fn(bench, *[params[n] for n in names], seed)


def clear_caches() -> None:
    _base_policy.cache_clear()
    _ma_setup.cache_clear()
