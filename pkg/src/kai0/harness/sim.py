"""Latency-aware closed-loop simulation of a chunking policy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ..control import (
    ExecutionBuffer,
    SmoothingConfig,
    Strategy,
    boundary_jerk,
    executor_tick,
    strategy_temporal_ensemble,
    swap,
    with_k,
)
from ..core import Episode, Provenance, Rng
from ..env import EnvConfig, EnvState, observe, reset, step
from ..policy import PolicyNet


class ChunkPolicy(Protocol):
    def __call__(self, obs: np.ndarray, stage: int, tick: int) -> np.ndarray: ...


class NetPolicy:
    """Adapter from a PolicyNet to the simulator's policy protocol."""

    def __init__(self, net: PolicyNet):
        self.net = net

    def __call__(self, obs, stage, tick):
        return self.net.predict(np.asarray(obs)[None], [stage])[0]


@dataclass(frozen=True)
class SimConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    inference_latency_ticks: int = 20
    K: int = 50
    control_hz: int = 100
    max_episode_ticks: int | None = None
    refill_threshold: int | None = None  # default K // 2

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.inference_latency_ticks < 0 or self.inference_latency_ticks >= self.H:
            raise ValueError("latency must satisfy 0 <= latency < H")

    @property
    def H(self) -> int:
        return self.max_episode_ticks or self.env.H

    @property
    def threshold(self) -> int:
        return self.K // 2 if self.refill_threshold is None else self.refill_threshold


@dataclass
class EpisodeMetrics:
    success: bool
    ticks: int
    stages_completed: int
    score: float
    retries: int
    idle_ticks: int
    swaps: int
    boundary_jerk: float
    swap_ticks: list = field(default_factory=list)


def _distance_to_goal(s: EnvState, cfg: EnvConfig) -> float:
    if s.g >= cfg.S:
        return 0.0
    return float(np.linalg.norm(s.p - np.array(cfg.waypoints[s.g])))


class RetryCounter:
    """Counts approach-then-withdraw events: within ``near`` of the goal, then beyond ``far`` without capture."""

    def __init__(self, cfg: EnvConfig, near: float = 2.0, far: float = 3.0):
        self.near = near * cfg.r_goal
        self.far = far * cfg.r_goal
        self.cfg = cfg
        self.armed = False
        self.stage = 0
        self.count = 0

    def update(self, s: EnvState) -> None:
        if s.g != self.stage:
            self.stage = s.g
            self.armed = False
            return
        d = _distance_to_goal(s, self.cfg)
        if d < self.near:
            self.armed = True
        elif self.armed and d > self.far:
            self.count += 1
            self.armed = False


def run_episode(
    policy: ChunkPolicy,
    sim: SimConfig,
    rng: Rng,
    initial_state: EnvState | None = None,
    trace: list | None = None,
) -> tuple[Episode, EpisodeMetrics]:
    """Simulate one episode.

    Per tick: issue an inference request when none is pending and the residual
    drops below the refill threshold; deliver any chunk that is due (computed
    from the observation at request time); emit one action; step the env.
    At delivery the swap sees ``k`` = ticks elapsed since the request.
    """
    cfg = sim.env
    s = initial_state if initial_state is not None else reset(cfg, rng.child("reset"))
    obs_rng = rng.child("obs")
    strat = sim.smoothing.strategy
    ensemble = strat is Strategy.TEMPORAL_ENSEMBLE
    buf = ExecutionBuffer.empty()
    history: list[tuple[int, np.ndarray]] = []
    last = np.zeros(2)
    executed_since_swap: list[np.ndarray] = []
    pending = None  # (due_tick, request_tick, chunk)
    states, actions, stages, ticks = [s.p.copy()], [], [], [s.t]
    retry = RetryCounter(cfg)
    retry.stage = s.g
    idle = 0
    swap_ticks: list[int] = []
    t0 = s.t
    while s.g < cfg.S and s.t - t0 < sim.H:
        t = s.t
        if pending is None:
            if ensemble:
                residual = max((start + len(a) - t for start, a in history[-1:]), default=0)
            else:
                residual = len(buf)
            need = residual == 0 if strat is Strategy.SYNC_HOLD else residual < sim.threshold
            if need:
                chunk = np.asarray(policy(observe(s, cfg, obs_rng), s.g, t), dtype=np.float64)
                pending = (t + sim.inference_latency_ticks, t, chunk)
        swapped = False
        if pending is not None and pending[0] <= t:
            _, t_req, chunk = pending
            pending = None
            swapped = True
            if ensemble:
                history.append((t_req, chunk))
                history = [(st, a) for st, a in history if st + len(a) > t]
            else:
                old = with_k(buf, t - t_req)
                if sim.smoothing.blend_full_old and executed_since_swap:
                    old = ExecutionBuffer(np.concatenate([np.array(executed_since_swap), buf.actions]), t - t_req, buf.last)
                new_buf = swap(old, chunk, sim.smoothing)
                swapped = new_buf is not old
                buf = new_buf if swapped else buf
                if swapped:
                    executed_since_swap = []
        if swapped:
            swap_ticks.append(len(actions))
        if ensemble:
            try:
                a = strategy_temporal_ensemble(history, t, sim.smoothing.ensemble_decay)
                held = False
            except ValueError:
                a, held = last.copy(), True
        else:
            a, buf, held = executor_tick(buf)
            executed_since_swap.append(a)
        idle += int(held)
        last = a
        stages.append(s.g)
        s = step(s, a, cfg)
        retry.update(s)
        actions.append(np.clip(a, -cfg.action_clip, cfg.action_clip))
        states.append(s.p.copy())
        ticks.append(s.t)
        if trace is not None:
            trace.append(
                {"tick": t, "action": [float(x) for x in a], "buffer": len(buf), "k": buf.k, "swap": swapped, "held": held}
            )
    acts = np.array(actions).reshape(len(actions), 2)
    ep = Episode(
        states=np.array(states),
        actions=acts,
        stage_labels=np.array(stages, dtype=np.int64),
        timestamps=np.array(ticks, dtype=np.int64),
        provenance=Provenance.ROLLOUT,
        env_params=cfg,
        final_stage=s.g,
        episode_id=f"rollout-{rng.seed}-{'.'.join(map(str, rng.path))}",
    )
    m = EpisodeMetrics(
        success=s.g >= cfg.S,
        ticks=len(actions),
        stages_completed=s.g,
        score=100.0 * s.g / cfg.S,
        retries=retry.count,
        idle_ticks=idle,
        swaps=len(swap_ticks),
        boundary_jerk=boundary_jerk(acts, swap_ticks),
        swap_ticks=swap_ticks,
    )
    return ep, m


def rollout_many(policy: ChunkPolicy, sim: SimConfig, rng: Rng, n: int) -> list[tuple[Episode, EpisodeMetrics]]:
    return [run_episode(policy, sim, rng.child("episode", i)) for i in range(n)]


def success_rate(policy: ChunkPolicy, sim: SimConfig, rng: Rng, n: int) -> float:
    return float(np.mean([m.success for _, m in rollout_many(policy, sim, rng, n)]))

