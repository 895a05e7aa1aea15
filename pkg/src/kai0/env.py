"""Multi-stage 2D waypoint reacher: dynamics, scripted expert, and dataset generators.

The default waypoint set is a loop whose last leg ends on the first leg, so a
position on the bottom edge belongs to stage 1 early in an episode and to the
final stage at its end.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ActionChunk, Episode, Provenance, Rng

DEFAULT_WAYPOINTS = ((-0.6, -0.6), (0.6, -0.6), (0.6, 0.6), (0.0, -0.6))
FAILURE_KINDS = ("overshoot", "wrong_basin", "stalled_offset")
BOUND = 1.2
EXPERT_GAIN = 0.05  # per tick: the final approach decays with a 20-tick time constant
EXPERT_NOISE_FRACTION = 0.2  # default demonstration noise, relative to action_clip
DEGRADED_NOISE_FRACTION = 0.8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    S: int = 4
    waypoints: tuple = DEFAULT_WAYPOINTS
    r_goal: float = 0.05
    H: int = 600
    dt: float = 1.0
    action_clip: float = 0.05
    obs_noise_sigma: float = 0.0
    xi_seed: int = 0

    def __post_init__(self):
        wps = tuple(tuple(float(c) for c in w) for w in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if len(wps) != self.S:
            raise ConfigError(f"expected {self.S} waypoints, got {len(wps)}")
        if self.r_goal <= 0 or self.action_clip <= 0 or self.H < 1 or self.dt <= 0:
            raise ConfigError("r_goal, action_clip, dt must be > 0 and H >= 1")
        if self.obs_noise_sigma < 0:
            raise ConfigError("obs_noise_sigma must be >= 0")
        w = np.array(wps)
        if np.any(np.abs(w) > 1.0):
            raise ConfigError("waypoints must lie in [-1, 1]^2")
        for i in range(self.S):
            for j in range(i + 1, self.S):
                if np.allclose(w[i], w[j]):
                    raise ConfigError(f"waypoints {i} and {j} coincide")
        for i in range(self.S - 1):
            if np.linalg.norm(w[i + 1] - w[i]) <= 2 * self.r_goal:
                raise ConfigError(f"waypoints {i} and {i + 1} closer than 2*r_goal")

    @property
    def waypoint_array(self) -> np.ndarray:
        return np.array(self.waypoints, dtype=np.float64)

    def mirrored(self) -> "EnvConfig":
        return replace(self, waypoints=tuple((-x, y) for x, y in self.waypoints))

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "waypoints": [list(w) for w in self.waypoints],
            "r_goal": self.r_goal,
            "H": self.H,
            "dt": self.dt,
            "action_clip": self.action_clip,
            "obs_noise_sigma": self.obs_noise_sigma,
            "xi_seed": self.xi_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "waypoints" in d:
            d["waypoints"] = tuple(tuple(w) for w in d["waypoints"])
        return cls(**d)


@dataclass(frozen=True)
class EnvState:
    p: np.ndarray = field(compare=False)
    g: int
    t: int

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64).reshape(2)
        p.setflags(write=False)
        object.__setattr__(self, "p", p)


def benchmark_config(**overrides) -> EnvConfig:
    """The slower environment used by the experiment suite.

    At the default speed an agent crosses the whole workspace within one
    40-tick inference delay, so chunked open-loop execution cannot hit a
    capture radius; a fifth of the speed (and twice the horizon) keeps the
    latency sweep meaningful.
    """
    base = dict(action_clip=0.01, H=1200)
    base.update(overrides)
    return EnvConfig(**base)


def default_noise(cfg: EnvConfig, noise_sigma: float | None) -> float:
    return EXPERT_NOISE_FRACTION * cfg.action_clip if noise_sigma is None else float(noise_sigma)


def reset(cfg: EnvConfig, rng: Rng) -> EnvState:
    return EnvState(rng.uniform(-1.0, 1.0, size=2), 0, 0)


def clip_action(a, limit: float) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64), -limit, limit)


def _controller(target: np.ndarray, p: np.ndarray, limit: float) -> np.ndarray:
    """Proportional command toward ``target`` with its speed (norm) capped at ``limit``.

    Capping the norm rather than each axis keeps expert paths straight, so the
    future actions seen from any point of a leg are nearly constant.
    """
    a = EXPERT_GAIN * (target - p)
    n = float(np.linalg.norm(a))
    return a * (limit / n) if n > limit else a


def step(s: EnvState, a, cfg: EnvConfig, clip: float | None = None) -> EnvState:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (2,):
        raise ValueError(f"action must have 2 components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    limit = cfg.action_clip if clip is None else clip
    p = np.clip(s.p + clip_action(a, limit) * cfg.dt, -BOUND, BOUND)
    g = s.g
    if g < cfg.S and np.linalg.norm(p - cfg.waypoints[g]) < cfg.r_goal:
        g += 1
    return EnvState(p, g, s.t + 1)


def observe(s: EnvState, cfg: EnvConfig, rng: Rng | None = None) -> np.ndarray:
    if cfg.obs_noise_sigma > 0 and rng is not None:
        return s.p + rng.normal(0.0, cfg.obs_noise_sigma, size=2)
    return s.p.copy()


def mirror_state(s: EnvState) -> EnvState:
    return EnvState(s.p * np.array([-1.0, 1.0]), s.g, s.t)


# ---------------------------------------------------------------------------
# scripted expert


def expert_policy(
    s: EnvState, cfg: EnvConfig, rng: Rng | None = None, noise_sigma: float = 0.0, K: int = 50
) -> ActionChunk:
    """K copies of the proportional command at ``s`` (zero-order hold), plus per-entry noise."""
    if s.g >= cfg.S:
        raise ValueError("task already complete")
    a = _controller(np.array(cfg.waypoints[s.g]), s.p, cfg.action_clip)
    out = np.repeat(a[None, :], K, axis=0)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    return ActionChunk(out, produced_at_tick=s.t)


def expert_action(s: EnvState, cfg: EnvConfig, rng: Rng | None, noise_sigma: float) -> np.ndarray:
    target = np.array(cfg.waypoints[s.g])
    a = _controller(target, s.p, cfg.action_clip)
    if noise_sigma > 0:
        a = a + rng.normal(0.0, noise_sigma, size=2)
    return a


class _Recorder:
    def __init__(self, s0: EnvState):
        self.states = [s0.p.copy()]
        self.actions: list[np.ndarray] = []
        self.stages: list[int] = []
        self.ticks = [s0.t]
        self.state = s0

    def push(self, a, cfg: EnvConfig) -> EnvState:
        a = clip_action(a, cfg.action_clip)
        self.stages.append(self.state.g)
        self.state = step(self.state, a, cfg)
        self.actions.append(a)
        self.states.append(self.state.p.copy())
        self.ticks.append(self.state.t)
        return self.state

    def episode(self, cfg: EnvConfig, provenance, episode_id: str, flags=None) -> Episode:
        return Episode(
            states=np.array(self.states),
            actions=np.array(self.actions).reshape(len(self.actions), 2),
            stage_labels=np.array(self.stages, dtype=np.int64),
            timestamps=np.array(self.ticks, dtype=np.int64),
            provenance=provenance,
            env_params=cfg,
            final_stage=self.state.g,
            episode_id=episode_id,
            flags=dict(flags or {}),
        )


def expert_rollout(
    s0: EnvState, cfg: EnvConfig, rng: Rng, noise_sigma: float, recorder: _Recorder | None = None
) -> _Recorder:
    rec = recorder or _Recorder(s0)
    s = rec.state
    while s.g < cfg.S and s.t < cfg.H:
        s = rec.push(expert_action(s, cfg, rng, noise_sigma), cfg)
    return rec


def generate_expert_dataset(
    cfg: EnvConfig, n_episodes: int, rng: Rng, noise_sigma: float | None = None, tag: str = "expert"
) -> list[Episode]:
    """Closed-loop expert demonstrations; only successful episodes are kept."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    noise_sigma = default_noise(cfg, noise_sigma)
    out = []
    for i in range(n_episodes):
        for attempt in range(10):
            r = rng.child(tag, i, attempt)
            rec = expert_rollout(reset(cfg, r.child("reset")), cfg, r.child("noise"), noise_sigma)
            if rec.state.g >= cfg.S:
                out.append(rec.episode(cfg, Provenance.EXPERT, f"{tag}-{rng.seed}-{i}"))
                break
        else:
            raise ConfigError(f"expert could not solve slot {i} within H={cfg.H}")
    return out


def generate_degraded_dataset(
    cfg: EnvConfig,
    n_episodes: int,
    rng: Rng,
    noise_sigma: float | None = None,
    stall_prob: float = 0.03,
    stall_len: tuple[int, int] = (15, 40),
    tag: str = "degraded",
) -> list[Episode]:
    """Low-quality demonstrations: heavy action noise plus idle spells with jitter.

    Idle spells start with probability ``stall_prob`` per tick. Episodes that run
    out of horizon are kept, since poor demonstrators also fail.
    """
    if noise_sigma is None:
        noise_sigma = DEGRADED_NOISE_FRACTION * cfg.action_clip
    out = []
    for i in range(n_episodes):
        r = rng.child(tag, i)
        rec = _Recorder(reset(cfg, r.child("reset")))
        noise = r.child("noise")
        s = rec.state
        idle = 0
        while s.g < cfg.S and s.t < cfg.H:
            if idle == 0 and noise.random() < stall_prob:
                idle = int(noise.integers(stall_len[0], stall_len[1] + 1))
            if idle > 0:
                idle -= 1
                a = noise.normal(0.0, 0.25 * noise_sigma, size=2)
            else:
                a = expert_action(s, cfg, noise, noise_sigma)
            s = rec.push(a, cfg)
        out.append(rec.episode(cfg, Provenance.DEGRADED, f"{tag}-{rng.seed}-{i}"))
    return out


# ---------------------------------------------------------------------------
# Heuristic DAgger: start directly in designed failure states


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0.0])


def failure_state(kind: str, cfg: EnvConfig, rng: Rng) -> EnvState:
    """Sample a mid-task failure state of the given kind.

    Stages are drawn from ``1..S-1`` so that every failure state is one that
    ``reset`` (which always starts at stage 0) never produces.
    """
    w = cfg.waypoint_array
    S = cfg.S
    g = int(rng.integers(1, S)) if S > 1 else 0
    r = cfg.r_goal
    if kind == "overshoot":
        incoming = _unit(w[g] - w[g - 1]) if g >= 1 else _unit(w[min(1, S - 1)] - w[0])
        p = w[g] + incoming * rng.uniform(2 * r, 4 * r)
    elif kind == "wrong_basin":
        others = [j for j in range(S) if j != g] or [g]
        j = others[int(rng.integers(0, len(others)))]
        ang = rng.uniform(0, 2 * np.pi)
        p = w[j] + np.array([np.cos(ang), np.sin(ang)]) * rng.uniform(1.5 * r, 3 * r)
    elif kind == "stalled_offset":
        start = w[g - 1] if g >= 1 else w[0] + np.array([0.0, 0.5])
        seg = w[g] - start
        normal = np.array([-seg[1], seg[0]])
        normal = _unit(normal)
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = start + rng.uniform(0.3, 0.7) * seg + side * normal * rng.uniform(3 * r, 6 * r)
    else:
        raise ValueError(f"unknown failure kind {kind!r}")
    return EnvState(np.clip(p, -BOUND, BOUND), g, 0)


def heuristic_dagger_dataset(
    cfg: EnvConfig,
    n_episodes: int,
    failure_kinds: Sequence[str] = FAILURE_KINDS,
    rng: Rng | None = None,
    noise_sigma: float | None = None,
    tag: str = "hdagger",
) -> list[Episode]:
    noise_sigma = default_noise(cfg, noise_sigma)
    kinds = list(failure_kinds)
    if not kinds:
        raise ValueError("failure_kinds must be non-empty")
    bad = set(kinds) - set(FAILURE_KINDS)
    if bad:
        raise ValueError(f"unknown failure kinds {sorted(bad)}")
    rng = rng or Rng(0)
    out = []
    for i in range(n_episodes):
        kind = kinds[i % len(kinds)]
        r = rng.child(tag, i)
        s0 = failure_state(kind, cfg, r.child("state"))
        rec = expert_rollout(s0, cfg, r.child("noise"), noise_sigma)
        out.append(
            rec.episode(cfg, Provenance.HEURISTIC_DAGGER, f"{tag}-{rng.seed}-{i}", {"failure_kind": kind})
        )
    return out


# ---------------------------------------------------------------------------
# standard DAgger: roll the learner, splice in expert recovery on a stall

PolicyFn = Callable[[EnvState], ActionChunk]


def dagger_dataset(
    policy: PolicyFn,
    cfg: EnvConfig,
    n_episodes: int,
    stall_window: int | None = None,
    rng: Rng | None = None,
    replan_every: int = 10,
    noise_sigma: float | None = None,
    tag: str = "dagger",
) -> list[Episode]:
    """Roll ``policy`` (re-queried every ``replan_every`` ticks) and correct stalls.

    A stall is declared when the stage has not advanced and the agent moved less
    than ``r_goal / 2`` over the last ``stall_window`` ticks (default: ten
    replanning steps). The rollout prefix plus the expert correction is kept as
    ``dagger``; rollouts that never stall are kept as ``rollout``.
    """
    rng = rng or Rng(0)
    noise_sigma = default_noise(cfg, noise_sigma)
    window = stall_window if stall_window is not None else 10 * replan_every
    out = []
    for i in range(n_episodes):
        r = rng.child(tag, i)
        rec = _Recorder(reset(cfg, r.child("reset")))
        s = rec.state
        chunk = None
        cursor = 0
        last_stage_change = 0
        stalled_at = None
        while s.g < cfg.S and s.t < cfg.H:
            if chunk is None or cursor >= min(replan_every, len(chunk)):
                chunk = policy(s).actions
                cursor = 0
            g_before = s.g
            s = rec.push(chunk[cursor], cfg)
            cursor += 1
            if s.g != g_before:
                last_stage_change = s.t
            if s.t - last_stage_change >= window:
                back = rec.states[-1 - window]
                if np.linalg.norm(s.p - back) < cfg.r_goal / 2:
                    stalled_at = s.t
                    break
        if stalled_at is None:
            out.append(rec.episode(cfg, Provenance.ROLLOUT, f"{tag}-{rng.seed}-{i}"))
            continue
        expert_rollout(s, cfg, r.child("noise"), noise_sigma, recorder=rec)
        out.append(
            rec.episode(cfg, Provenance.DAGGER, f"{tag}-{rng.seed}-{i}", {"correction_tick": stalled_at})
        )
    return out


# ---------------------------------------------------------------------------
# spatio-temporal augmentation


def augment_mirror(e: Episode) -> Episode:
    """Reflect across x = 0 (states, actions and waypoints)."""
    flip = np.array([-1.0, 1.0])
    return Episode(
        states=e.states * flip,
        actions=e.actions * flip,
        stage_labels=e.stage_labels,
        timestamps=e.timestamps,
        provenance=Provenance.AUGMENTED,
        env_params=e.env_params.mirrored(),
        final_stage=e.final_stage,
        episode_id=e.episode_id + "~mirror",
        flags={**e.flags, "mirrored": not e.flags.get("mirrored", False)},
    )


def augment_frameskip(e: Episode, skip_prob: float, rng: Rng) -> Episode:
    """Drop interior frames at random, merging each dropped action into its survivor.

    Frames where a stage capture happens are kept so the replay sees every
    capture. Merged actions are clipped to twice the action clip; the episode
    is flagged when that clipping changed anything.
    """
    if not 0.0 <= skip_prob <= 0.5:
        raise ValueError("skip_prob must lie in [0, 0.5]")
    if e.T < 3:
        raise ValueError("episode shorter than 3 steps")
    cfg = e.env_params
    if skip_prob == 0.0:
        return e
    labels = np.append(e.stage_labels, e.final_stage)
    draws = rng.random(e.T + 1)
    keep = np.ones(e.T + 1, dtype=bool)
    for t in range(1, e.T):
        if labels[t] == labels[t - 1] and draws[t] < skip_prob:
            keep[t] = False
    kept = np.flatnonzero(keep)
    limit = 2 * cfg.action_clip
    merged = []
    clipped = False
    for a, b in zip(kept[:-1], kept[1:]):
        total = e.actions[a:b].sum(axis=0)
        c = np.clip(total, -limit, limit)
        clipped |= not np.array_equal(c, total)
        merged.append(c)
    # replay with the relaxed clip to recompute states and stage labels
    s = EnvState(e.states[0], int(e.stage_labels[0]), 0)
    states = [s.p.copy()]
    stages = []
    for a in merged:
        stages.append(s.g)
        s = step(s, a, cfg, clip=limit)
        states.append(s.p.copy())
    return Episode(
        states=np.array(states),
        actions=np.array(merged),
        stage_labels=np.array(stages, dtype=np.int64),
        timestamps=e.timestamps[0] + np.arange(len(states)),
        provenance=Provenance.AUGMENTED,
        env_params=cfg,
        final_stage=s.g,
        episode_id=e.episode_id + f"~skip{rng.seed}",
        flags={**e.flags, "frameskip": True, "clipped": bool(clipped)},
    )


def replay(e: Episode, cfg: EnvConfig | None = None, clip: float | None = None) -> EnvState:
    """Re-execute the recorded actions from the first state; returns the final state."""
    cfg = cfg or e.env_params
    s = EnvState(e.states[0], int(e.stage_labels[0]) if e.T else e.final_stage, 0)
    for a in e.actions:
        s = step(s, a, cfg, clip=clip)
    return s


def concat(*datasets: Iterable[Episode]) -> list[Episode]:
    out: list[Episode] = []
    for d in datasets:
        out.extend(d)
    return out
