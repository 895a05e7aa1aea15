"""Stage Advantage: direct pairwise progress estimation and the value-difference baseline.

The direct estimator regresses f(s, s' | g) onto the relative progress between
two frames of one episode. In staged mode both frames come from one stage
segment and progress is normalised by that segment's span; the stage enters
the network as the scalar g = index / S. The baseline instead regresses a
value V(s) onto global progress t/T and differences it over a horizon.
Advantages are turned into a binary optimality indicator by rank.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Episode, Rng
from .policy import MLPLayout, TrainConfig, fit, init_params, mlp_forward

DEFAULT_TAU_SMOOTH = 0.05
DEFAULT_EPSILON_FRACTION = 0.3
DEFAULT_HORIZON = 50


@dataclass(frozen=True)
class StageLabel:
    index: int
    S: int

    def __post_init__(self):
        if self.S < 1 or not 0 <= self.index < self.S:
            raise ValueError(f"stage index {self.index} outside [0, {self.S})")

    @property
    def scalar(self) -> float:
        return self.index / self.S


@dataclass(frozen=True, eq=False)
class AdvantageSamples:
    """A batch of (s, s', g, target, delta) pairs in columnar form.

    ``g`` is NaN for the non-staged variant.
    """

    s: np.ndarray
    s_prime: np.ndarray
    g: np.ndarray
    target: np.ndarray
    delta: np.ndarray
    episode_index: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if np.any(self.delta < 1):
            raise ValueError("delta must be >= 1")
        if np.any(np.abs(self.target) > 1.0 + 1e-12):
            raise ValueError("targets must lie in [-1, 1]")

    def __len__(self) -> int:
        return len(self.target)

    @property
    def staged(self) -> bool:
        return len(self.g) > 0 and not np.isnan(self.g[0])


@dataclass(frozen=True)
class AdvantageSample:
    """One row of ``AdvantageSamples``."""

    s: np.ndarray
    s_prime: np.ndarray
    g: float | None
    target: float
    delta: int


def sample_rows(samples: AdvantageSamples) -> list[AdvantageSample]:
    return [
        AdvantageSample(samples.s[i], samples.s_prime[i], None if np.isnan(samples.g[i]) else float(samples.g[i]),
                        float(samples.target[i]), int(samples.delta[i]))
        for i in range(len(samples))
    ]


def frame_stages(e: Episode) -> np.ndarray:
    """Stage of every frame 0..T (the final frame carries the final stage)."""
    return np.r_[e.stage_labels, e.final_stage].astype(np.int64)


def stage_segments(e: Episode) -> list[tuple[int, int, int]]:
    """(stage, first_frame, last_frame) for each maximal run of equal frame stages below S."""
    fs = frame_stages(e)
    out = []
    start = 0
    for i in range(1, len(fs) + 1):
        if i == len(fs) or fs[i] != fs[start]:
            if fs[start] < e.S:
                out.append((int(fs[start]), start, i - 1))
            start = i
    return out


def _ordered_pair(rng: Rng, lo: int, hi: int) -> tuple[int, int]:
    """Uniform pair t < t' from the frames lo..hi inclusive."""
    a, b = rng.permutation(hi - lo + 1)[:2] + lo
    return (int(a), int(b)) if a < b else (int(b), int(a))


def sample_pairs(episodes: Sequence[Episode], n_pairs: int, staged: bool, rng: Rng) -> AdvantageSamples:
    """Draw ``n_pairs`` forward-time frame pairs.

    Non-staged: pick an episode, then t < t' anywhere; target (t' - t) / T.
    Staged: pick an episode, then one of its stage segments with at least two
    frames, then t < t' inside it; target (t' - t) / span where span is the
    segment's frame count minus one; g = stage / S.
    """
    eps = [e for e in episodes if e.T >= 1]
    if not eps:
        raise ValueError("need episodes with at least two frames")
    segs = [[sg for sg in stage_segments(e) if sg[2] > sg[1]] for e in eps] if staged else None
    usable = [i for i in range(len(eps)) if (segs[i] if staged else True)]
    if not usable:
        raise ValueError("no stage segment with at least two frames")
    cols = {k: [] for k in ("s", "sp", "g", "y", "d", "ei", "t")}
    for k in range(n_pairs):
        r = rng.child("pair", k)
        ei = usable[int(r.integers(0, len(usable)))]
        e = eps[ei]
        if staged:
            g, lo, hi = segs[ei][int(r.integers(0, len(segs[ei])))]
            t, tp = _ordered_pair(r, lo, hi)
            y = (tp - t) / (hi - lo)
            gs = g / e.S
        else:
            t, tp = _ordered_pair(r, 0, e.T)
            y = (tp - t) / e.T
            gs = np.nan
        cols["s"].append(e.states[t])
        cols["sp"].append(e.states[tp])
        cols["g"].append(gs)
        cols["y"].append(y)
        cols["d"].append(tp - t)
        cols["ei"].append(ei)
        cols["t"].append(t)
    return AdvantageSamples(
        np.array(cols["s"]).reshape(n_pairs, -1),
        np.array(cols["sp"]).reshape(n_pairs, -1),
        np.array(cols["g"], dtype=np.float64),
        np.array(cols["y"], dtype=np.float64),
        np.array(cols["d"], dtype=np.int64),
        np.array(cols["ei"], dtype=np.int64),
        np.array(cols["t"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# networks


@dataclass(frozen=True)
class AdvantageConfig:
    n_pairs: int = 20000
    hidden: tuple = (64, 64)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=4000, lr=1e-3, decay_steps=4000))
    horizon: int = DEFAULT_HORIZON  # span used when scoring training samples
    epsilon_fraction: float = DEFAULT_EPSILON_FRACTION
    threshold_mode: str = "rank"  # "rank": top-ε fraction positive; "value": A > ε

    def __post_init__(self):
        if self.n_pairs < 1 or self.horizon < 1:
            raise ValueError("n_pairs and horizon must be >= 1")
        if self.threshold_mode not in ("rank", "value"):
            raise ValueError("threshold_mode must be 'rank' or 'value'")


@dataclass(frozen=True, eq=False)
class AdvantageNet:
    """f(s, s' [, g]) -> scalar, the same tanh MLP family as the policy."""

    layout: MLPLayout
    params: object  # ParameterVector
    staged: bool
    state_dim: int = 2
    curve: tuple = ()

    def features(self, s, s_prime, g=None) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))[:, : self.state_dim]
        sp = np.atleast_2d(np.asarray(s_prime, dtype=np.float64))[:, : self.state_dim]
        cols = [s, sp]
        if self.staged:
            if g is None:
                raise ValueError("staged estimator needs a stage scalar")
            cols.append(np.broadcast_to(np.asarray(g, dtype=np.float64).reshape(-1, 1), (len(s), 1)))
        return np.hstack(cols)

    def __call__(self, s, s_prime, g=None) -> np.ndarray:
        out, _ = mlp_forward(self.layout, self.params.values, self.features(s, s_prime, g))
        return out[:, 0]


def advantage_layout(staged: bool, hidden=(64, 64), state_dim: int = 2) -> MLPLayout:
    return MLPLayout((2 * state_dim + int(staged), *hidden, 1), 1.0)


def init_advantage(staged: bool, rng: Rng, hidden=(64, 64), state_dim: int = 2) -> AdvantageNet:
    layout = advantage_layout(staged, hidden, state_dim)
    return AdvantageNet(layout, init_params(layout, rng), staged, state_dim)


def train_advantage(samples: AdvantageSamples, cfg: AdvantageConfig = AdvantageConfig(), rng: Rng | None = None) -> AdvantageNet:
    """Squared-error regression of f onto the pair targets.

    Each pair is also presented time-reversed with the negated target, which
    anchors f(s', s) = -f(s, s') and f(s, s) = 0.
    """
    if len(samples) == 0:
        raise ValueError("no samples")
    rng = rng or Rng(cfg.train.seed)
    net = init_advantage(samples.staged, rng.child("init"), cfg.hidden, samples.s.shape[1])
    g = samples.g if samples.staged else None
    X = np.vstack([net.features(samples.s, samples.s_prime, g), net.features(samples.s_prime, samples.s, g)])
    y = np.r_[samples.target, -samples.target][:, None]
    params, curve = fit(net.layout, net.params, X, y, None, cfg.train, rng.child("fit"))
    return replace(net, params=params, curve=tuple(curve))


@dataclass(frozen=True, eq=False)
class ValueNet:
    """V(s) regressed onto global progress t / T."""

    layout: MLPLayout
    params: object
    state_dim: int = 2
    curve: tuple = ()

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))[:, : self.state_dim]
        out, _ = mlp_forward(self.layout, self.params.values, s)
        return out[:, 0]


def value_targets(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray]:
    X, y = [], []
    for e in episodes:
        if e.T < 1:
            continue
        X.append(e.states)
        y.append(np.arange(e.T + 1) / e.T)
    return np.concatenate(X), np.concatenate(y)


def train_value(episodes: Sequence[Episode], cfg: AdvantageConfig = AdvantageConfig(), rng: Rng | None = None) -> ValueNet:
    rng = rng or Rng(cfg.train.seed)
    X, y = value_targets(episodes)
    layout = MLPLayout((X.shape[1], *cfg.hidden, 1), 1.0)
    params, curve = fit(layout, init_params(layout, rng.child("init")), X, y[:, None], None, cfg.train, rng.child("fit"))
    return ValueNet(layout, params, X.shape[1], tuple(curve))


class ValueDifference:
    """Baseline advantage A_t = V(s_{t+h}) - V(s_t) with h = min(horizon, T - t)."""

    def __init__(self, value: ValueNet, horizon: int = DEFAULT_HORIZON):
        self.value = value
        self.horizon = horizon

    def episode_advantages(self, e: Episode, horizon: int | None = None) -> np.ndarray:
        h = self.horizon if horizon is None else horizon
        v = self.value(e.states)
        t = np.arange(e.T)
        return v[np.minimum(t + h, e.T)] - v[t]


def baseline_value_difference(
    episodes: Sequence[Episode], horizon: int = DEFAULT_HORIZON, cfg: AdvantageConfig = AdvantageConfig(), rng: Rng | None = None
) -> tuple[ValueNet, ValueDifference]:
    if not any(e.T > horizon for e in episodes):
        raise ValueError(f"no episode is longer than the horizon {horizon}")
    v = train_value(episodes, cfg, rng)
    return v, ValueDifference(v, horizon)


class DirectEstimator:
    """Per-step advantages from a trained f, scored over a span of up to ``horizon`` frames.

    In staged mode the second frame is clamped to the frame that closes the
    current stage, so every evaluated pair stays within (or on the boundary
    of) the segment the estimator was trained on. The raw output is divided
    by the span so truncated pairs remain comparable per tick.
    """

    def __init__(self, net: AdvantageNet, horizon: int = DEFAULT_HORIZON):
        self.net = net
        self.horizon = horizon

    def pair_ends(self, e: Episode, horizon: int) -> np.ndarray:
        t = np.arange(e.T)
        end = np.minimum(t + horizon, e.T)
        if self.net.staged:
            fs = frame_stages(e)
            # first frame index after t whose stage differs (or T)
            change = np.r_[np.flatnonzero(np.diff(fs)) + 1, e.T]
            nxt = change[np.searchsorted(change, t, side="right")]
            end = np.minimum(end, nxt)
        return end

    def episode_advantages(self, e: Episode, horizon: int | None = None, per_tick: bool = True) -> np.ndarray:
        h = self.horizon if horizon is None else horizon
        t = np.arange(e.T)
        end = self.pair_ends(e, h)
        g = e.stage_labels / e.S if self.net.staged else None
        a = self.net(e.states[t], e.states[end], g)
        return a / (end - t) * h if per_tick else a


def per_frame_advantages(estimator, e: Episode) -> np.ndarray:
    """a_t for t in 0..T-1 from the pair (s_t, s_{t+1}) (stage g_t when staged)."""
    if e.T < 1:
        raise ValueError("episode too short")
    if isinstance(estimator, DirectEstimator):
        return estimator.episode_advantages(e, horizon=1, per_tick=False)
    return estimator.episode_advantages(e, horizon=1)


def episode_sample_advantages(estimator, episodes: Sequence[Episode]) -> np.ndarray:
    """One advantage per (episode, step), in the order used by policy.bc_dataset."""
    return np.concatenate([estimator.episode_advantages(e) for e in episodes if e.T > 0])


# ---------------------------------------------------------------------------
# indicator and metrics


def binarize(advantages, epsilon_fraction: float = DEFAULT_EPSILON_FRACTION, mode: str = "rank", epsilon: float | None = None) -> np.ndarray:
    """Binary optimality indicator.

    ``rank``: the top ``epsilon_fraction`` of samples by advantage (descending,
    ties to the lower index) are positive; the count is floor(fraction * n).
    ``value``: positive iff A > epsilon (default: ``epsilon_fraction``).
    """
    a = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValueError("advantages must be finite")
    if mode == "value":
        thr = epsilon_fraction if epsilon is None else epsilon
        return a > thr
    if mode != "rank":
        raise ValueError("mode must be 'rank' or 'value'")
    if not 0.0 <= epsilon_fraction <= 1.0:
        raise ValueError("epsilon_fraction must lie in [0, 1]")
    n_pos = int(np.floor(epsilon_fraction * len(a) + 1e-9))
    order = np.lexsort((np.arange(len(a)), -a))
    out = np.zeros(len(a), dtype=bool)
    out[order[:n_pos]] = True
    return out


def stability_metrics(series, tau_smooth: float = DEFAULT_TAU_SMOOTH) -> tuple[float, float]:
    """(MSTD, SFR): mean squared first difference and fraction of |Δa| < tau."""
    a = np.asarray(series, dtype=np.float64).reshape(-1)
    if len(a) < 2:
        raise ValueError("need at least two values")
    d = np.diff(a)
    return float(np.mean(d * d)), float(np.mean(np.abs(d) < tau_smooth))


def cumulative_value_trace(estimator, e: Episode) -> np.ndarray:
    return np.cumsum(per_frame_advantages(estimator, e))


def trace_csv(estimator, e: Episode) -> str:
    """CSV with columns t, a_t, cumulative."""
    a = per_frame_advantages(estimator, e)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "a_t", "cumulative"])
    for t, (x, c) in enumerate(zip(a, np.cumsum(a))):
        w.writerow([t, repr(float(x)), repr(float(c))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# end to end


VARIANTS = ("direct_stage", "direct", "value_diff", "none")


def fit_estimator(variant: str, episodes: Sequence[Episode], cfg: AdvantageConfig = AdvantageConfig(), rng: Rng | None = None):
    """Train the estimator for one variant on ``episodes`` (None for ``none``)."""
    rng = rng or Rng(cfg.train.seed)
    if variant == "none":
        return None
    if variant in ("direct_stage", "direct"):
        samples = sample_pairs(episodes, cfg.n_pairs, variant == "direct_stage", rng.child("pairs"))
        return DirectEstimator(train_advantage(samples, cfg, rng.child("net")), cfg.horizon)
    if variant == "value_diff":
        return baseline_value_difference(episodes, cfg.horizon, cfg, rng.child("value"))[1]
    raise ValueError(f"unknown advantage variant {variant!r}; choose from {VARIANTS}")


def sample_weights(variant: str, episodes: Sequence[Episode], weight_negative: float, cfg: AdvantageConfig = AdvantageConfig(), rng: Rng | None = None):
    """BC sample weights {1, weight_negative} from the binarized advantage (None = unweighted)."""
    est = fit_estimator(variant, episodes, cfg, rng)
    if est is None:
        return None, None
    ind = binarize(episode_sample_advantages(est, episodes), cfg.epsilon_fraction, cfg.threshold_mode)
    return np.where(ind, 1.0, float(weight_negative)), est
