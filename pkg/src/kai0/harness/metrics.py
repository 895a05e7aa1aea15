"""Episode-level evaluation metrics: success, throughput, retries, score, stability, jerk."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..advantage import per_frame_advantages, stability_metrics
from .sim import EpisodeMetrics, SimConfig

METRIC_NAMES = ("SR", "TP", "retry_cost", "score", "MSTD", "SFR", "boundary_jerk")


def standard_error(x) -> float:
    """Sample standard deviation over sqrt(n); 0 for a single observation."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))


def throughput(successes: int, total_ticks: int, control_hz: float) -> float:
    """Completed tasks per simulated hour of execution."""
    if total_ticks <= 0:
        return 0.0
    return successes / (total_ticks / control_hz / 3600.0)


@dataclass
class MetricsReport:
    SR: float
    TP: float
    retry_cost: float
    score: float
    MSTD: float | None
    SFR: float | None
    boundary_jerk: float
    n_episodes: int
    mean_ticks: float
    se: dict = field(default_factory=dict)
    per_seed: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.SR <= 1.0:
            raise ValueError("SR must lie in [0, 1]")
        if not 0.0 <= self.score <= 100.0:
            raise ValueError("score must lie in [0, 100]")

    def to_dict(self) -> dict:
        return {
            "SR": self.SR,
            "TP": self.TP,
            "retry_cost": self.retry_cost,
            "score": self.score,
            "MSTD": self.MSTD,
            "SFR": self.SFR,
            "boundary_jerk": self.boundary_jerk,
            "n_episodes": self.n_episodes,
            "mean_ticks": self.mean_ticks,
            "se": dict(self.se),
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
        }


def _core(ms: Sequence[EpisodeMetrics], control_hz: float) -> dict:
    succ = np.array([m.success for m in ms], dtype=np.float64)
    ticks = np.array([m.ticks for m in ms], dtype=np.float64)
    return {
        "SR": float(succ.mean()),
        "TP": throughput(int(succ.sum()), int(ticks.sum()), control_hz),
        "retry_cost": float(np.mean([m.retries for m in ms])),
        "score": float(np.mean([m.score for m in ms])),
        "boundary_jerk": float(np.mean([m.boundary_jerk for m in ms])),
        "mean_ticks": float(ticks.mean()),
    }


def compute_metrics(
    results: Sequence,
    sim: SimConfig,
    seeds: Sequence[int] | None = None,
    estimator=None,
    tau_smooth: float = 0.05,
) -> MetricsReport:
    """Aggregate per-episode results.

    ``results`` holds EpisodeMetrics or (Episode, EpisodeMetrics) pairs;
    ``seeds`` (one per result) groups them for the per-seed breakdown. MSTD
    and SFR are computed from ``estimator`` over the executed episodes when
    one is given (they need the Episode objects).
    """
    if not results:
        raise ValueError("no episodes to score")
    episodes = [r[0] for r in results] if isinstance(results[0], tuple) else None
    ms = [r[1] if isinstance(r, tuple) else r for r in results]
    core = _core(ms, sim.control_hz)
    se = {
        "SR": standard_error([m.success for m in ms]),
        "retry_cost": standard_error([m.retries for m in ms]),
        "score": standard_error([m.score for m in ms]),
        "boundary_jerk": standard_error([m.boundary_jerk for m in ms]),
    }
    mstd = sfr = None
    if estimator is not None and episodes is not None:
        pairs = [stability_metrics(per_frame_advantages(estimator, e), tau_smooth) for e in episodes if e.T >= 2]
        if pairs:
            mstd = float(np.mean([p[0] for p in pairs]))
            sfr = float(np.mean([p[1] for p in pairs]))
            se["MSTD"] = standard_error([p[0] for p in pairs])
            se["SFR"] = standard_error([p[1] for p in pairs])
    per_seed = {}
    if seeds is not None:
        if len(seeds) != len(ms):
            raise ValueError("one seed per result required")
        for s in sorted(set(seeds)):
            per_seed[s] = _core([m for m, k in zip(ms, seeds) if k == s], sim.control_hz)
        se["TP"] = standard_error([v["TP"] for v in per_seed.values()])
    return MetricsReport(
        SR=core["SR"],
        TP=core["TP"],
        retry_cost=core["retry_cost"],
        score=core["score"],
        MSTD=mstd,
        SFR=sfr,
        boundary_jerk=core["boundary_jerk"],
        n_episodes=len(ms),
        mean_ticks=core["mean_ticks"],
        se=se,
        per_seed=per_seed,
    )
