"""Shared domain types, flat-parameter arithmetic, seeded randomness and file formats."""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

PARAM_MAGIC = b"KAI0PV1\0"


class LayoutMismatchError(ValueError):
    """Two parameter vectors with different architectures were combined."""

    def __init__(self, left: str, right: str, detail: str = ""):
        self.left = left
        self.right = right
        msg = f"layout mismatch: {left!r} vs {right!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# randomness


def _key_int(key: Any) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.sha256(repr(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based (Philox) generator addressed by ``seed`` and a key path.

    ``child(*keys)`` derives an independent stream, so a cell or an episode
    slot draws the same numbers no matter in which order work is scheduled.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: Any) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_int(k) for k in keys))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------------------
# parameter vectors


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout_id: str

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            raise ValueError("parameter vector must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout_id == other.layout_id and np.array_equal(self.values, other.values)

    def check_compatible(self, other: "ParameterVector") -> None:
        if self.layout_id != other.layout_id:
            raise LayoutMismatchError(self.layout_id, other.layout_id)
        if len(self) != len(other):
            raise LayoutMismatchError(self.layout_id, other.layout_id, f"length {len(self)} != {len(other)}")


def param_axpy(dst: ParameterVector, alpha: float, src: ParameterVector) -> ParameterVector:
    """Return ``dst + alpha * src`` without touching either input."""
    dst.check_compatible(src)
    return ParameterVector(dst.values + float(alpha) * src.values, dst.layout_id)


def save_params(p: ParameterVector, path) -> None:
    layout = p.layout_id.encode("utf-8")
    if len(layout) >= 2**32:
        raise FormatError("layout string overflow")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<I", len(layout)))
        fh.write(layout)
        fh.write(struct.pack("<Q", len(p)))
        fh.write(p.values.astype("<f8").tobytes())


def load_params(path) -> ParameterVector:
    data = Path(path).read_bytes()
    if data[:8] != PARAM_MAGIC:
        raise FormatError("bad magic")
    off = 8
    if len(data) < off + 4:
        raise FormatError("truncated file")
    (n_layout,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + n_layout:
        raise FormatError("layout string overflow")
    layout = data[off : off + n_layout].decode("utf-8")
    off += n_layout
    if len(data) < off + 8:
        raise FormatError("truncated file")
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + 8 * n:
        raise FormatError("truncated file")
    values = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
    return ParameterVector(values, layout)


# ---------------------------------------------------------------------------
# action chunks and episodes


@dataclass(frozen=True, eq=False)
class ActionChunk:
    actions: np.ndarray  # (length, A)
    produced_at_tick: int = 0

    def __post_init__(self):
        a = np.array(self.actions, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValueError("action chunk needs at least one action")
        if not np.all(np.isfinite(a)):
            raise ValueError("action chunk has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "actions", a)

    def __len__(self) -> int:
        return self.actions.shape[0]


class Provenance(str, enum.Enum):
    EXPERT = "expert"
    DAGGER = "dagger"
    HEURISTIC_DAGGER = "heuristic_dagger"
    AUGMENTED = "augmented"
    ROLLOUT = "rollout"
    DEGRADED = "degraded"


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Episode:
    """A recorded trajectory.

    ``stage_labels[t]`` is the stage in force when ``actions[t]`` was taken;
    ``final_stage`` is the stage after the last transition (``S`` on success).
    """

    states: np.ndarray  # (T+1, D)
    actions: np.ndarray  # (T, A)
    stage_labels: np.ndarray  # (T,)
    timestamps: np.ndarray  # (T+1,)
    provenance: Provenance
    env_params: Any  # EnvConfig
    final_stage: int
    episode_id: str = ""
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64)
        actions = np.array(self.actions, dtype=np.float64)
        actions = actions.reshape(len(states) - 1, -1) if actions.size else actions.reshape(0, 2)
        stages = np.array(self.stage_labels, dtype=np.int64).reshape(-1)
        ts = np.array(self.timestamps, dtype=np.int64).reshape(-1)
        for arr in (states, actions, stages, ts):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "stage_labels", stages)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "final_stage", int(self.final_stage))
        validate_episode(self)

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def S(self) -> int:
        return int(self.env_params.S)

    @property
    def success(self) -> bool:
        return self.final_stage >= self.S

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.stage_labels, other.stage_labels)
            and np.array_equal(self.timestamps, other.timestamps)
            and self.provenance == other.provenance
            and self.final_stage == other.final_stage
            and self.episode_id == other.episode_id
            and self.env_params == other.env_params
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.states, self.actions, self.stage_labels, self.timestamps):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.provenance.value}|{self.final_stage}|{self.episode_id}".encode())
        return h.hexdigest()


def validate_episode(e: Episode) -> None:
    if e.states.ndim != 2 or e.states.shape[0] < 1:
        raise EpisodeError("episode needs at least one state")
    if e.actions.shape[0] != e.states.shape[0] - 1:
        raise EpisodeError("|states| must equal |actions| + 1")
    if e.stage_labels.shape[0] != e.actions.shape[0]:
        raise EpisodeError("one stage label per action required")
    if e.timestamps.shape[0] != e.states.shape[0]:
        raise EpisodeError("one timestamp per state required")
    if np.any(np.diff(e.timestamps) <= 0):
        raise EpisodeError("non-monotone timestamps")
    labels = np.append(e.stage_labels, e.final_stage)
    if np.any(np.diff(labels) < 0):
        raise EpisodeError("non-monotone stages")
    S = e.S
    if e.stage_labels.size and (e.stage_labels.min() < 0 or e.stage_labels.max() >= S):
        raise EpisodeError("stage label out of range")
    if not 0 <= e.final_stage <= S:
        raise EpisodeError("stage label out of range")
    if not (np.all(np.isfinite(e.states)) and np.all(np.isfinite(e.actions))):
        raise EpisodeError("non-finite values in episode")


def _f(x: float) -> float:
    # repr() of a Python float round-trips exactly; json keeps it.
    return float(x)


def episode_to_lines(e: Episode) -> list[str]:
    header = {
        "kind": "episode",
        "episode_id": e.episode_id,
        "provenance": e.provenance.value,
        "S": e.S,
        "final_stage": e.final_stage,
        "env_params": e.env_params.to_dict(),
        "flags": e.flags,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(e.T + 1):
        rec = {
            "t": int(e.timestamps[t]),
            "state": [_f(x) for x in e.states[t]],
            "action": [_f(x) for x in e.actions[t]] if t < e.T else None,
            "stage": int(e.stage_labels[t]) if t < e.T else e.final_stage,
        }
        lines.append(json.dumps(rec))
    return lines


def episode_from_lines(lines: Sequence[str]) -> Episode:
    from .env import EnvConfig

    try:
        header = json.loads(lines[0])
    except (json.JSONDecodeError, IndexError) as exc:
        raise EpisodeError(f"malformed line 1: {exc}") from None
    if header.get("kind") != "episode":
        raise EpisodeError("malformed line 1: missing episode header")
    cfg = EnvConfig.from_dict(header["env_params"])
    states, actions, stages, ts = [], [], [], []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            states.append(rec["state"])
            ts.append(rec["t"])
            stages.append(rec["stage"])
            if rec["action"] is not None:
                actions.append(rec["action"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise EpisodeError(f"malformed line {i}: {exc}") from None
    if not states:
        raise EpisodeError("episode without steps")
    A = len(actions[0]) if actions else 2
    return Episode(
        states=np.array(states, dtype=np.float64),
        actions=np.array(actions, dtype=np.float64).reshape(len(actions), A),
        stage_labels=np.array(stages[:-1], dtype=np.int64),
        timestamps=np.array(ts, dtype=np.int64),
        provenance=header["provenance"],
        env_params=cfg,
        final_stage=stages[-1],
        episode_id=header.get("episode_id", ""),
        flags=header.get("flags", {}),
    )


def save_episodes(episodes: Iterable[Episode], path) -> None:
    """Write episodes to one JSONL file (header line followed by step lines, per episode)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in episodes:
            for line in episode_to_lines(e):
                fh.write(line + "\n")


def load_episodes(path) -> list[Episode]:
    episodes: list[Episode] = []
    block: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if '"kind": "episode"' in line:
                if block:
                    episodes.append(episode_from_lines(block))
                block = [line]
            elif not block:
                raise EpisodeError(f"malformed line {lineno}: step before header")
            else:
                block.append(line)
    if block:
        episodes.append(episode_from_lines(block))
    return episodes


def save_episode(e: Episode, path) -> None:
    save_episodes([e], path)


def load_episode(path) -> Episode:
    eps = load_episodes(path)
    if len(eps) != 1:
        raise EpisodeError(f"expected one episode, found {len(eps)}")
    return eps[0]


def stable_hash(obj: Any) -> str:
    """SHA-256 of the canonical JSON encoding (sorted keys)."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


