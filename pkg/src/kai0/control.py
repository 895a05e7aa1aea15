"""Chunked-action execution: temporal chunk-wise smoothing and the strategies it is compared with.

Everything here is a pure function over small buffers so it can be tested
without the simulator. An ``ExecutionBuffer`` holds only the residual
(not yet executed) actions; ``k`` counts actions consumed since the last swap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import ActionChunk


class Strategy(str, enum.Enum):
    SYNC_HOLD = "sync_hold"
    NAIVE_SWITCH = "naive_switch"
    TEMPORAL_ENSEMBLE = "temporal_ensemble"
    CHUNK_SMOOTH = "chunk_smooth"
    PREFIX_FREEZE = "prefix_freeze"
    CHUNK_SMOOTH_PLUS_FREEZE = "chunk_smooth_plus_freeze"


@dataclass(frozen=True)
class SmoothingConfig:
    d_max: int = 10
    m_min: int = 5
    strategy: Strategy = Strategy.CHUNK_SMOOTH
    ensemble_decay: float = 0.5
    blend_full_old: bool = False  # compatibility mode: old buffer includes executed actions

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.d_max < 0 or self.m_min < 1:
            raise ValueError("need d_max >= 0 and m_min >= 1")
        if not 0.0 < self.ensemble_decay <= 1.0:
            raise ValueError("ensemble_decay must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class ExecutionBuffer:
    actions: np.ndarray  # (n, A), residual commands
    k: int = 0
    last: np.ndarray | None = None  # last emitted action, for hold-on-underrun

    def __post_init__(self):
        a = np.array(self.actions, dtype=np.float64)
        if a.size == 0:
            a = a.reshape(0, self.last.shape[0] if self.last is not None else 2)
        elif a.ndim == 1:
            a = a.reshape(-1, 1)
        object.__setattr__(self, "actions", a)
        if self.k < 0:
            raise ValueError("k must be >= 0")

    def __len__(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def empty(cls, A: int = 2) -> "ExecutionBuffer":
        return cls(np.zeros((0, A)))


def _chunk_array(new_chunk) -> np.ndarray:
    a = new_chunk.actions if isinstance(new_chunk, ActionChunk) else np.asarray(new_chunk, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.shape[0] == 0:
        raise ValueError("empty new chunk")
    return a


def _padded_old(old: ExecutionBuffer, m_min: int) -> np.ndarray:
    a = old.actions
    if len(a) >= m_min:
        return a
    if len(a) == 0:
        # nothing residual: pad from the held action; before the first emitted
        # action there is nothing to blend from and the new chunk is adopted as is
        if old.last is None:
            return a
        return np.repeat(old.last[None, :], m_min, axis=0)
    return np.concatenate([a, np.repeat(a[-1:], m_min - len(a), axis=0)])


def smooth_swap(old: ExecutionBuffer, new_chunk, cfg: SmoothingConfig | None = None, *, d_max=None, m_min=None) -> ExecutionBuffer:
    """Temporal chunk-wise smoothing of a freshly delivered chunk into the buffer."""
    cfg = cfg or SmoothingConfig()
    d_max = cfg.d_max if d_max is None else d_max
    m_min = cfg.m_min if m_min is None else m_min
    new = _chunk_array(new_chunk)
    d = min(old.k, d_max)
    if d >= len(new):
        return old
    new_rem = new[d:]
    prev = _padded_old(old, m_min)
    L = min(len(prev), len(new_rem))
    if L == 0:
        return ExecutionBuffer(new_rem.copy(), 0, old.last)
    w = 1.0 - np.arange(L) / max(L - 1, 1)
    blended = w[:, None] * prev[:L] + (1.0 - w[:, None]) * new_rem[:L]
    # where old and new agree the blend is that value exactly (no rounding drift)
    blended = np.where(prev[:L] == new_rem[:L], new_rem[:L], blended)
    return ExecutionBuffer(np.concatenate([blended, new_rem[L:]]), 0, old.last)


def executor_tick(buf: ExecutionBuffer) -> tuple[np.ndarray, ExecutionBuffer, bool]:
    """Emit one action. Returns (action, new buffer, held) where ``held`` marks an underrun."""
    if len(buf):
        a = buf.actions[0].copy()
        return a, ExecutionBuffer(buf.actions[1:], buf.k + 1, a), False
    a = buf.last.copy() if buf.last is not None else np.zeros(buf.actions.shape[1])
    return a, ExecutionBuffer(buf.actions, buf.k + 1, a), True


def strategy_naive_switch(old: ExecutionBuffer, new_chunk, k: int | None = None, d_max: int = 10) -> ExecutionBuffer:
    new = _chunk_array(new_chunk)
    k = old.k if k is None else k
    d = min(k, d_max)
    if d >= len(new):
        return old
    return ExecutionBuffer(new[d:], 0, old.last)


def freeze_prefix(residual: np.ndarray, new_rem: np.ndarray, n: int) -> np.ndarray:
    """Overwrite the first ``n`` commands of ``new_rem`` with the committed residual ones."""
    out = np.array(new_rem, dtype=np.float64, copy=True)
    f = min(n, len(residual), len(out))
    out[:f] = residual[:f]
    return out


def strategy_prefix_freeze(old: ExecutionBuffer, new_chunk, k: int | None = None, d_max: int = 10) -> ExecutionBuffer:
    """Stand-in for real-time chunking: keep the committed commands, then switch.

    After dropping ``d = min(k, d_max)`` stale commands, the next ``d`` slots of
    the new chunk are hard-frozen to the old residual commands. Guided
    inpainting of the remainder is not modelled.
    """
    new = _chunk_array(new_chunk)
    k = old.k if k is None else k
    d = min(k, d_max)
    if d >= len(new):
        return old
    return ExecutionBuffer(freeze_prefix(old.actions, new[d:], d), 0, old.last)


def smooth_with_freeze(old: ExecutionBuffer, new_chunk, cfg: SmoothingConfig) -> ExecutionBuffer:
    """Freeze the committed prefix first, then cross-fade the rest."""
    new = _chunk_array(new_chunk)
    d = min(old.k, cfg.d_max)
    if d >= len(new):
        return old
    frozen = np.concatenate([new[:d], freeze_prefix(old.actions, new[d:], d)])
    return smooth_swap(old, frozen, cfg)


def strategy_temporal_ensemble(history: Sequence[tuple[int, np.ndarray]], tick: int, decay: float = 0.5) -> np.ndarray:
    """Exponentially weighted average over every live chunk's prediction for ``tick``.

    ``history`` holds (start_tick, actions) pairs, oldest first; the newest chunk
    has age 0 and weight 1, the one before it ``decay`` and so on.
    """
    live = [(start, a) for start, a in history if 0 <= tick - start < len(a)]
    if not live:
        raise ValueError(f"no chunk covers tick {tick}")
    n = len(live)
    weights = np.array([decay ** (n - 1 - i) for i in range(n)])
    preds = np.array([a[tick - start] for start, a in live])
    avg = weights @ preds / weights.sum()
    return np.where(np.all(preds == preds[0], axis=0), preds[0], avg)


def swap(old: ExecutionBuffer, new_chunk, cfg: SmoothingConfig) -> ExecutionBuffer:
    """Dispatch a buffer swap according to ``cfg.strategy`` (temporal ensembling has no buffer)."""
    s = cfg.strategy
    if s is Strategy.CHUNK_SMOOTH:
        return smooth_swap(old, new_chunk, cfg)
    if s is Strategy.NAIVE_SWITCH:
        return strategy_naive_switch(old, new_chunk, old.k, cfg.d_max)
    if s is Strategy.PREFIX_FREEZE:
        return strategy_prefix_freeze(old, new_chunk, old.k, cfg.d_max)
    if s is Strategy.CHUNK_SMOOTH_PLUS_FREEZE:
        return smooth_with_freeze(old, new_chunk, cfg)
    if s is Strategy.SYNC_HOLD:
        return ExecutionBuffer(_chunk_array(new_chunk), 0, old.last)
    raise ValueError(f"strategy {s.value} does not swap buffers")


def boundary_jerk(actions: np.ndarray, swap_ticks: Sequence[int]) -> float:
    """Mean squared action change across ticks that follow a swap."""
    actions = np.asarray(actions)
    idx = [t for t in swap_ticks if 1 <= t < len(actions)]
    if not idx:
        return 0.0
    diffs = actions[idx] - actions[[t - 1 for t in idx]]
    return float(np.mean(np.sum(diffs * diffs, axis=1)))


def with_k(buf: ExecutionBuffer, k: int) -> ExecutionBuffer:
    return replace(buf, k=int(k))
