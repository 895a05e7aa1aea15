"""Two-hidden-layer tanh MLP with hand-written backprop, and behavior cloning on top of it."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import ActionChunk, Episode, ParameterVector, Rng


class TrainingDiverged(RuntimeError):
    pass


class ZeroWeightError(ValueError):
    def __init__(self):
        super().__init__("all-zero weight sum")


# ---------------------------------------------------------------------------
# network layout and math

_LAYOUT_RE = re.compile(r"^mlp:([0-9-]+):tanh:scale=(.+)$")


@dataclass(frozen=True)
class MLPLayout:
    sizes: tuple[int, ...]  # (in, hidden..., out)
    out_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"bad layout {self.sizes}")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.shapes)

    @property
    def layout_id(self) -> str:
        return f"mlp:{'-'.join(map(str, self.sizes))}:tanh:scale={self.out_scale!r}"

    @classmethod
    def from_id(cls, layout_id: str) -> "MLPLayout":
        m = _LAYOUT_RE.match(layout_id)
        if not m:
            raise ValueError(f"unrecognised layout id {layout_id!r}")
        return cls(tuple(int(x) for x in m.group(1).split("-")), float(m.group(2)))

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers, off = [], 0
        for fi, fo in self.shapes:
            W = values[off : off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = values[off : off + fo]
            off += fo
            layers.append((W, b))
        return layers


def init_params(layout: MLPLayout, rng: Rng, zero_head: bool = False) -> ParameterVector:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for i, (fi, fo) in enumerate(layout.shapes):
        bound = math.sqrt(6.0 / (fi + fo))
        last = i == len(layout.shapes) - 1
        W = np.zeros((fi, fo)) if (last and zero_head) else rng.child("layer", i).uniform(-bound, bound, (fi, fo))
        chunks += [W.ravel(), np.zeros(fo)]
    return ParameterVector(np.concatenate(chunks), layout.layout_id)


def mlp_forward(layout: MLPLayout, values: np.ndarray, X: np.ndarray):
    layers = layout.unpack(values)
    acts = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = z if i == len(layers) - 1 else np.tanh(z)
        acts.append(h)
    return acts[-1] * layout.out_scale, (layers, acts)


def mlp_backward(layout: MLPLayout, cache, dY: np.ndarray) -> np.ndarray:
    """Gradient of sum(dY * output) w.r.t. the flat parameters."""
    layers, acts = cache
    grads = []
    delta = dY * layout.out_scale
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in = acts[i]
        grads.append((h_in.T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
    flat = []
    for gW, gb in reversed(grads):
        flat += [gW.ravel(), gb]
    return np.concatenate(flat)


def weighted_sq_loss(layout: MLPLayout, values: np.ndarray, X, Y, w=None, need_grad=True):
    """loss = sum_b w_b ||f(x_b) - y_b||^2 / sum_b w_b, plus its gradient."""
    pred, cache = mlp_forward(layout, values, X)
    diff = pred - Y
    if w is None:
        w = np.ones(len(X))
    wsum = float(np.sum(w))
    if wsum <= 0:
        raise ZeroWeightError()
    per = np.sum(diff * diff, axis=1)
    loss = float(np.dot(w, per) / wsum)
    if not need_grad:
        return loss, None
    dY = (2.0 / wsum) * w[:, None] * diff
    return loss, mlp_backward(layout, cache, dY)


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 8000
    batch: int = 128
    lr: float = 2.5e-4
    decay_steps: int = 8000
    final_lr_fraction: float = 0.1
    grad_clip: float = 1.0
    weight_negative: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.batch, self.decay_steps) < 1 or self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("training hyper-parameters must be positive")
        if not 0.0 <= self.weight_negative <= 1.0:
            raise ValueError("weight_negative must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        frac = min(step, self.decay_steps) / self.decay_steps
        cos = 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)


def fit(
    layout: MLPLayout,
    params: ParameterVector,
    X: np.ndarray,
    Y: np.ndarray,
    weights: np.ndarray | None,
    cfg: TrainConfig,
    rng: Rng | None = None,
    log_every: int = 100,
) -> tuple[ParameterVector, list[tuple[int, float]]]:
    """Minibatch Adam with cosine learning-rate decay and global-norm clipping."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    w_all = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w_all.shape != (len(X),):
        raise ValueError("one weight per sample required")
    if np.any(w_all < 0):
        raise ValueError("weights must be >= 0")
    if w_all.sum() <= 0:
        raise ZeroWeightError()
    rng = rng or Rng(cfg.seed)
    draws = rng.child("batches")
    theta = params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    curve = []
    running = 0.0
    n = len(X)
    for it in range(cfg.steps):
        idx = draws.integers(0, n, size=min(cfg.batch, n)) if n > cfg.batch else np.arange(n)
        wb = w_all[idx]
        if wb.sum() <= 0:
            continue
        loss, g = weighted_sq_loss(layout, theta, X[idx], Y[idx], wb)
        if not math.isfinite(loss) or not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite loss at step {it}")
        gn = float(np.linalg.norm(g))
        if gn > cfg.grad_clip:
            g = g * (cfg.grad_clip / gn)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        theta = theta - cfg.lr_at(it) * mhat / (np.sqrt(vhat) + eps)
        running += loss
        if (it + 1) % log_every == 0:
            curve.append((it + 1, running / log_every))
            running = 0.0
    return ParameterVector(theta, params.layout_id), curve


# ---------------------------------------------------------------------------
# the policy


@dataclass(frozen=True, eq=False)
class PolicyNet:
    """State -> action-chunk regressor.

    Input is position plus an S-dim stage slot; the slot is zero unless
    ``stage_input`` is set (stage-blind by default).
    """

    layout: MLPLayout
    params: ParameterVector
    K: int
    A: int = 2
    S: int = 4
    stage_input: bool = False
    curve: tuple = field(default=())

    def __post_init__(self):
        if len(self.params) != self.layout.n_params or self.params.layout_id != self.layout.layout_id:
            raise ValueError("params do not match layout")
        if self.layout.out_dim != self.K * self.A or self.layout.in_dim != 2 + self.S:
            raise ValueError("layout inconsistent with K, A, S")

    def with_params(self, params: ParameterVector) -> "PolicyNet":
        return replace(self, params=params, curve=())

    def features(self, states: np.ndarray, stages=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        X = np.zeros((len(states), 2 + self.S))
        X[:, :2] = states[:, :2]
        if self.stage_input and stages is not None:
            st = np.clip(np.atleast_1d(stages).astype(int), 0, self.S - 1)
            X[np.arange(len(states)), 2 + st] = 1.0
        return X

    def predict(self, states, stages=None) -> np.ndarray:
        X = self.features(states, stages)
        out, _ = mlp_forward(self.layout, self.params.values, X)
        return out.reshape(len(X), self.K, self.A)


def policy_layout(S: int, K: int, A: int = 2, hidden: Sequence[int] = (64, 64), scale: float = 0.05) -> MLPLayout:
    return MLPLayout((2 + S, *hidden, K * A), scale)


def init_policy(
    layout: MLPLayout, rng: Rng, K: int, S: int, A: int = 2, stage_input: bool = False, zero_head: bool = False
) -> PolicyNet:
    return PolicyNet(layout, init_params(layout, rng, zero_head), K, A, S, stage_input)


def forward(net: PolicyNet, state, stage: int | None = None, tick: int = 0) -> ActionChunk:
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if state.shape[0] != 2:
        raise ValueError(f"state dimension {state.shape[0]} does not match policy input")
    return ActionChunk(net.predict(state[None], None if stage is None else [stage])[0], produced_at_tick=tick)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True, eq=False)
class BCData:
    X: np.ndarray  # features
    Y: np.ndarray  # flattened target chunks
    states: np.ndarray
    stages: np.ndarray
    episode_index: np.ndarray
    step_index: np.ndarray

    def __len__(self) -> int:
        return len(self.X)


def target_chunks(e: Episode, K: int, stage_local: bool = True) -> np.ndarray:
    """Future K actions from every step, zero-padded past the end of the episode.

    With ``stage_local`` the chunk is also zeroed past the end of the current
    stage segment: every target ends at the capture that closes its stage, so
    the policy never has to guess when (and hence where) the turn towards the
    next waypoint begins.
    """
    T, A = e.actions.shape
    padded = np.zeros((T + K, A))
    padded[:T] = e.actions
    idx = np.arange(T)[:, None] + np.arange(K)[None, :]
    out = padded[idx]
    if stage_local:
        labels = np.full(T + K, -1, dtype=np.int64)
        labels[:T] = e.stage_labels
        out[labels[idx] != e.stage_labels[:, None]] = 0.0
    return out


def bc_dataset(episodes: Sequence[Episode], net_or_K, S: int | None = None, stage_input: bool = False) -> BCData:
    if isinstance(net_or_K, PolicyNet):
        K, S, stage_input = net_or_K.K, net_or_K.S, net_or_K.stage_input
    else:
        K = int(net_or_K)
    Xs, Ys, st, sg, ei, si = [], [], [], [], [], []
    for i, e in enumerate(episodes):
        if e.T == 0:
            continue
        st.append(e.states[:-1, :2])
        sg.append(e.stage_labels)
        Ys.append(target_chunks(e, K).reshape(e.T, -1))
        ei.append(np.full(e.T, i))
        si.append(np.arange(e.T))
    if not st:
        raise ValueError("empty dataset")
    states = np.concatenate(st)
    stages = np.concatenate(sg)
    X = np.zeros((len(states), 2 + S))
    X[:, :2] = states
    if stage_input:
        X[np.arange(len(states)), 2 + np.clip(stages, 0, S - 1)] = 1.0
    return BCData(X, np.concatenate(Ys), states, stages, np.concatenate(ei), np.concatenate(si))


def _as_data(net: PolicyNet, dataset) -> BCData:
    return dataset if isinstance(dataset, BCData) else bc_dataset(dataset, net)


def bc_loss_and_grad(net: PolicyNet, batch, weights=None) -> tuple[float, ParameterVector]:
    """Weighted squared chunk error and its analytic gradient.

    ``batch`` is a BCData or a (X, Y) pair of feature/target arrays.
    """
    if isinstance(batch, BCData):
        X, Y = batch.X, batch.Y
    else:
        X, Y = batch
    if len(X) == 0:
        raise ValueError("empty batch")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    if w is not None and np.any(w < 0):
        raise ValueError("weights must be >= 0")
    loss, g = weighted_sq_loss(net.layout, net.params.values, X, Y, w)
    return loss, ParameterVector(g, net.params.layout_id)


def train(net: PolicyNet, dataset, weights=None, cfg: TrainConfig = TrainConfig()) -> PolicyNet:
    data = _as_data(net, dataset)
    params, curve = fit(net.layout, net.params, data.X, data.Y, weights, cfg, Rng(cfg.seed).child("train"))
    return replace(net, params=params, curve=tuple(curve))


def validation_loss(params: ParameterVector, layout: MLPLayout, dataset: BCData) -> float:
    """Unweighted mean squared chunk error over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if params.layout_id != layout.layout_id:
        raise ValueError("params do not match layout")
    loss, _ = weighted_sq_loss(layout, params.values, dataset.X, dataset.Y, None, need_grad=False)
    return loss


def validation_loss_and_grad(params: ParameterVector, layout: MLPLayout, dataset: BCData):
    return weighted_sq_loss(layout, params.values, dataset.X, dataset.Y, None)


def advantage_weights(indicator: np.ndarray, weight_negative: float) -> np.ndarray:
    """Map a binary optimality indicator to sample weights {1, weight_negative}."""
    ind = np.asarray(indicator).astype(bool)
    return np.where(ind, 1.0, float(weight_negative))
