"""Model Arithmetic: weight-space merging of subset-trained checkpoints.

A merged policy is a convex combination of checkpoint parameter vectors. The
coefficients come from one of four strategies (uniform average, inverse
validation loss, softmax-parameterized gradient descent, greedy soup), each
scored against a validation objective. An objective is anything with
``loss(values)`` and ``loss_and_grad(values)``; ``PolicyObjective`` wraps a
held-out episode set and ``QuadraticObjective`` is a closed-form surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import softmax

from .core import LayoutMismatchError, ParameterVector, Rng
from .policy import BCData, MLPLayout, PolicyNet, TrainConfig, bc_dataset, train, weighted_sq_loss

SIMPLEX_TOL = 1e-9


class SimplexError(ValueError):
    pass


class MergeDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MergeCoefficients:
    alphas: np.ndarray

    def __post_init__(self):
        a = np.array(self.alphas, dtype=np.float64).reshape(-1)
        if a.size == 0 or not np.all(np.isfinite(a)):
            raise SimplexError("coefficients must be a nonempty finite vector")
        if np.any(a < -SIMPLEX_TOL) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
            raise SimplexError(f"coefficients {a.tolist()} are not on the simplex")
        a.setflags(write=False)
        object.__setattr__(self, "alphas", a)

    def __len__(self) -> int:
        return len(self.alphas)

    def tolist(self) -> list[float]:
        return [float(x) for x in self.alphas]


@dataclass
class CheckpointSet:
    checkpoints: list[ParameterVector]
    labels: list[str] = field(default_factory=list)
    losses: list = field(default_factory=list)  # cache of (objective, per-checkpoint losses)

    def __post_init__(self):
        if not self.checkpoints:
            raise ValueError("need at least one checkpoint")
        first = self.checkpoints[0]
        for c in self.checkpoints[1:]:
            first.check_compatible(c)
        if not self.labels:
            self.labels = [f"ckpt{i}" for i in range(len(self.checkpoints))]
        if len(self.labels) != len(self.checkpoints):
            raise ValueError("one label per checkpoint")

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def layout_id(self) -> str:
        return self.checkpoints[0].layout_id

    def matrix(self) -> np.ndarray:
        """(n, P) stack of checkpoint values."""
        return np.stack([c.values for c in self.checkpoints])


class Objective(Protocol):
    def loss(self, values: np.ndarray) -> float: ...

    def loss_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]: ...


class PolicyObjective:
    """Unweighted mean squared chunk error of a policy layout on a held-out set."""

    def __init__(self, layout: MLPLayout, data: BCData):
        if len(data) == 0:
            raise ValueError("empty validation set")
        self.layout = layout
        self.data = data

    @classmethod
    def from_episodes(cls, net: PolicyNet, episodes) -> "PolicyObjective":
        if not episodes:
            raise ValueError("empty validation set")
        return cls(net.layout, bc_dataset(episodes, net))

    def loss(self, values: np.ndarray) -> float:
        loss, _ = weighted_sq_loss(self.layout, values, self.data.X, self.data.Y, None, need_grad=False)
        return loss

    def loss_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]:
        return weighted_sq_loss(self.layout, values, self.data.X, self.data.Y, None)


class QuadraticObjective:
    """L(θ) = (θ − c)ᵀ H (θ − c) + b, a convex surrogate with closed-form gradient."""

    def __init__(self, center, hessian=None, offset: float = 0.0):
        self.center = np.asarray(center, dtype=np.float64)
        n = self.center.size
        self.H = np.eye(n) if hessian is None else np.asarray(hessian, dtype=np.float64)
        self.offset = float(offset)

    def loss(self, values: np.ndarray) -> float:
        r = np.asarray(values) - self.center
        return float(r @ self.H @ r + self.offset)

    def loss_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]:
        r = np.asarray(values) - self.center
        Hr = self.H @ r
        return float(r @ Hr + self.offset), (self.H + self.H.T) @ r


def merge(cs: CheckpointSet, c: MergeCoefficients | Sequence[float]) -> ParameterVector:
    """Convex combination Σ α_i θ_i of the checkpoints."""
    if not isinstance(c, MergeCoefficients):
        c = MergeCoefficients(c)
    if len(c) != len(cs):
        raise SimplexError(f"{len(c)} coefficients for {len(cs)} checkpoints")
    return ParameterVector(c.alphas @ cs.matrix(), cs.layout_id)


def checkpoint_losses(cs: CheckpointSet, objective: Objective) -> np.ndarray:
    for obj, losses in cs.losses:
        if obj is objective:
            return losses
    losses = np.array([objective.loss(c.values) for c in cs.checkpoints])
    cs.losses.append((objective, losses))
    return losses


def strategy_average(cs: CheckpointSet) -> MergeCoefficients:
    n = len(cs)
    return MergeCoefficients(np.full(n, 1.0 / n))


def inverse_loss_coefficients(losses, p: float = 1.0, epsilon: float = 1e-8) -> MergeCoefficients:
    """α_i ∝ (L_i + ε)^(−p), computed in log space so large p stays finite."""
    if p <= 0 or epsilon <= 0:
        raise ValueError("need p > 0 and epsilon > 0")
    L = np.asarray(losses, dtype=np.float64)
    logw = -p * np.log(L + epsilon)
    return MergeCoefficients(softmax(logw))


def strategy_inverse_loss(cs: CheckpointSet, val: Objective, p: float = 1.0, epsilon: float = 1e-8) -> MergeCoefficients:
    return inverse_loss_coefficients(checkpoint_losses(cs, val), p, epsilon)


@dataclass
class GradientTrace:
    losses: list = field(default_factory=list)
    alphas: list = field(default_factory=list)


def strategy_gradient(
    cs: CheckpointSet,
    val: Objective,
    iters: int | None = None,
    step: float | None = None,
    adaptive: bool = False,
    betas: tuple[float, float] = (0.9, 0.9),
    trace: GradientTrace | None = None,
) -> MergeCoefficients:
    """Optimise α = softmax(w) on the validation objective, starting from uniform.

    The gradient w.r.t. α_i is ⟨∂L/∂θ_merged, θ_i⟩, pulled back through the
    softmax Jacobian. Returns the best iterate seen (including the start).

    The adaptive variant keeps a short second-moment memory (beta2 = 0.9):
    when the optimum sits on a simplex face the softmax gradient of the
    vanishing coordinates decays geometrically, and a long memory would
    shrink the normalised step until the iterate stalls short of the face.
    """
    if iters is None:
        iters = 1000 if adaptive else 200
    if step is None:
        step = 0.1 if adaptive else 0.5
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = len(cs)
    if n == 1:
        return MergeCoefficients([1.0])
    Theta = cs.matrix()
    w = np.zeros(n)
    m = np.zeros(n)
    v = np.zeros(n)
    best_loss, best_alpha = np.inf, None
    for it in range(iters + 1):
        alpha = softmax(w)
        loss, g_theta = val.loss_and_grad(alpha @ Theta)
        if not np.isfinite(loss):
            raise MergeDiverged(f"non-finite validation loss at iteration {it} (alpha={alpha.tolist()})")
        if trace is not None:
            trace.losses.append(loss)
            trace.alphas.append(alpha.copy())
        if loss < best_loss:
            best_loss, best_alpha = loss, alpha
        if it == iters:
            break
        g_alpha = Theta @ g_theta
        g_w = alpha * (g_alpha - alpha @ g_alpha)
        if adaptive:
            b1, b2 = betas
            m = b1 * m + (1 - b1) * g_w
            v = b2 * v + (1 - b2) * g_w * g_w
            mh = m / (1 - b1 ** (it + 1))
            vh = v / (1 - b2 ** (it + 1))
            w = w - step * mh / (np.sqrt(vh) + 1e-12)
        else:
            w = w - step * g_w
    return MergeCoefficients(best_alpha / best_alpha.sum())


@dataclass
class GreedyTrace:
    accepted_losses: list = field(default_factory=list)  # soup loss after each accepted addition
    selection: list = field(default_factory=list)  # checkpoint indices in the multiset, in order


def strategy_greedy(
    cs: CheckpointSet, val: Objective, reoffer: bool = True, trace: GreedyTrace | None = None
) -> MergeCoefficients:
    """Greedy soup: add checkpoints (best first) while uniform averaging strictly improves.

    Ties in individual loss break toward the lower index. With ``reoffer`` each
    checkpoint is offered once more after the first full pass, so a multiset
    (repeated ingredient) can result.
    """
    losses = checkpoint_losses(cs, val)
    order = [int(i) for i in np.argsort(losses, kind="stable")]
    Theta = cs.matrix()
    chosen = [order[0]]
    total = Theta[order[0]].copy()
    best = float(losses[order[0]])
    if trace is not None:
        trace.accepted_losses.append(best)
        trace.selection = list(chosen)
    passes = [order[1:]] + ([order] if reoffer else [])
    for candidates in passes:
        for i in candidates:
            cand = (total + Theta[i]) / (len(chosen) + 1)
            loss = val.loss(cand)
            if loss < best:
                chosen.append(i)
                total = total + Theta[i]
                best = loss
                if trace is not None:
                    trace.accepted_losses.append(best)
                    trace.selection = list(chosen)
    counts = np.bincount(chosen, minlength=len(cs)).astype(np.float64)
    return MergeCoefficients(counts / counts.sum())


STRATEGIES = ("average", "inverse_loss", "gradient", "gradient_adaptive", "greedy")


def coefficients(strategy: str, cs: CheckpointSet, val: Objective, **kw) -> MergeCoefficients:
    if strategy == "average":
        return strategy_average(cs)
    if strategy == "inverse_loss":
        return strategy_inverse_loss(cs, val, **kw)
    if strategy == "gradient":
        return strategy_gradient(cs, val, adaptive=False, **kw)
    if strategy == "gradient_adaptive":
        return strategy_gradient(cs, val, adaptive=True, **kw)
    if strategy == "greedy":
        return strategy_greedy(cs, val, **kw)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


# ---------------------------------------------------------------------------
# data splits and the end-to-end pipeline


class SplitOverlapError(ValueError):
    pass


def partition(episodes: Sequence, n: int, rng: Rng) -> list[list]:
    """Uniform random partition of ``episodes`` into ``n`` disjoint, near-equal subsets."""
    if n < 1 or n > len(episodes):
        raise ValueError("need 1 <= n <= number of episodes")
    perm = rng.permutation(len(episodes))
    return [[episodes[j] for j in sorted(part)] for part in np.array_split(perm, n)]


def build_validation_splits(expert_set: Sequence, dagger_set: Sequence, rng: Rng, holdout: float = 0.1):
    """Split into (train_pool, in_domain_val, ood_val).

    ``in_domain_val`` is a held-out ``holdout`` fraction of the expert episodes;
    ``ood_val`` is the whole recovery (DAgger / heuristic DAgger) set.
    """
    if not expert_set or not dagger_set:
        raise ValueError("both expert and recovery sets must be nonempty")
    bad = [e.provenance.value for e in dagger_set if e.provenance.value not in ("dagger", "heuristic_dagger")]
    if bad:
        raise ValueError(f"OOD split must hold recovery episodes, got provenance {sorted(set(bad))}")
    n_hold = max(1, int(round(holdout * len(expert_set))))
    perm = rng.permutation(len(expert_set))
    hold = set(int(i) for i in perm[:n_hold])
    in_val = [e for i, e in enumerate(expert_set) if i in hold]
    pool = [e for i, e in enumerate(expert_set) if i not in hold]
    check_disjoint([pool], [in_val, list(dagger_set)])
    return pool, in_val, list(dagger_set)


def check_disjoint(train_sets: Sequence[Sequence], val_sets: Sequence[Sequence]) -> None:
    train_ids = {e.episode_id for s in train_sets for e in s}
    for v in val_sets:
        overlap = train_ids & {e.episode_id for e in v}
        if overlap:
            raise SplitOverlapError(f"validation episodes also used for training: {sorted(overlap)[:5]}")


@dataclass
class MergeReport:
    strategy: str
    split: str
    alphas: list
    per_ckpt_loss: list
    merged_loss: float
    baselines: dict

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "split": self.split,
            "alphas": self.alphas,
            "per_ckpt_loss": self.per_ckpt_loss,
            "merged_loss": self.merged_loss,
            "baselines": self.baselines,
        }


def single_best_index(losses) -> int:
    """argmin of the individual losses; ties go to the lower index."""
    return int(np.argmin(np.asarray(losses)))


def train_checkpoints(net0: PolicyNet, subsets: Sequence[Sequence], cfg: TrainConfig) -> list[PolicyNet]:
    """Train one policy per subset from the shared initialisation ``net0``."""
    return [train(net0, list(s), None, cfg) for s in subsets]


def run_model_arithmetic(
    net0: PolicyNet,
    subsets: Sequence[Sequence],
    strategy: str,
    val_episodes: Sequence,
    split: str = "ood",
    cfg: TrainConfig = TrainConfig(),
    full_data: bool = True,
    nets: Sequence[PolicyNet] | None = None,
    **strategy_kw,
) -> tuple[ParameterVector, MergeReport, dict]:
    """Train per-subset checkpoints, merge them, and report against baselines.

    Returns (merged params, report, artifacts) where artifacts holds the
    trained nets (``checkpoints``, ``full``) for downstream simulation.
    ``nets`` may pass pre-trained checkpoints to skip retraining.
    """
    if len(subsets) < 2:
        raise ValueError("need at least two subsets")
    for i in range(len(subsets)):
        check_disjoint([subsets[i]], [s for j, s in enumerate(subsets) if j != i])
    check_disjoint(subsets, [val_episodes])
    nets = list(nets) if nets is not None else train_checkpoints(net0, subsets, cfg)
    cs = CheckpointSet([n.params for n in nets], [f"subset{i}" for i in range(len(nets))])
    val = PolicyObjective.from_episodes(net0, list(val_episodes))
    alphas = coefficients(strategy, cs, val, **strategy_kw)
    merged = merge(cs, alphas)
    losses = checkpoint_losses(cs, val)
    best = single_best_index(losses)
    baselines = {"single_best": {"index": best, "loss": float(losses[best])}}
    artifacts = {"checkpoints": nets, "full": None}
    if full_data:
        full = train(net0, [e for s in subsets for e in s], None, cfg)
        baselines["full_data"] = {"loss": float(val.loss(full.params.values))}
        artifacts["full"] = full
    report = MergeReport(strategy, split, alphas.tolist(), [float(x) for x in losses], float(val.loss(merged.values)), baselines)
    return merged, report, artifacts


__all__ = [
    "CheckpointSet",
    "GradientTrace",
    "GreedyTrace",
    "LayoutMismatchError",
    "MergeCoefficients",
    "MergeDiverged",
    "MergeReport",
    "PolicyObjective",
    "QuadraticObjective",
    "STRATEGIES",
    "SimplexError",
    "SplitOverlapError",
    "build_validation_splits",
    "check_disjoint",
    "checkpoint_losses",
    "coefficients",
    "inverse_loss_coefficients",
    "merge",
    "partition",
    "run_model_arithmetic",
    "single_best_index",
    "strategy_average",
    "strategy_gradient",
    "strategy_greedy",
    "strategy_inverse_loss",
    "train_checkpoints",
]
