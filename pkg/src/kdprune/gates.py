"""Hard Concrete gates over prune groups and the sparsity controller.

A gate ``z`` in [0, 1] multiplies one prune group.  During training it is
drawn from the stretched-and-clamped Hard Concrete distribution, which puts
finite mass on exactly 0 and exactly 1 while staying differentiable in the
location parameter ``log_alpha``.  The expected fraction of removed
parameters is pushed towards a target ``t`` with the min-max penalty
``lambda1 * (s - t) + lambda2 * (s - t) ** 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .tensor import CounterRNG, Tensor

GROUP_KINDS = ("attention_head", "ffn_hidden_unit", "conv_pointwise_channel", "lrf_rank")

DEFAULT_BETA = 2.0 / 3.0
DEFAULT_STRETCH_LO = -0.1
DEFAULT_STRETCH_HI = 1.1
DEFAULT_INIT_LOG_ALPHA = 2.5


@dataclass(frozen=True)
class PruneGroup:
    id: int
    kind: str
    owner: str
    index: int
    param_count: int

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.param_count <= 0:
            raise ValueError(f"group {self.id}: param_count must be positive")


def _check_stretch(lo: float, hi: float) -> None:
    if not (lo < 0.0 < 1.0 < hi):
        raise ValueError(f"stretch interval must satisfy lo < 0 < 1 < hi, got ({lo}, {hi})")


def _check_stretch(lo: float, hi: float) -> None:
    if not (lo < 0.0 and hi > 1.0):
        raise ValueError(f"stretch interval ({lo}, {hi}) must satisfy lo < 0 < 1 < hi")


def hard_concrete_sample(log_alpha: Tensor, u: np.ndarray, beta: float = DEFAULT_BETA,
                         lo: float = DEFAULT_STRETCH_LO, hi: float = DEFAULT_STRETCH_HI) -> Tensor:
    """Reparameterized gate sample for fixed noise ``u`` in (0, 1)."""
    _check_stretch(lo, hi)
    u = np.asarray(u, dtype=log_alpha.dtype)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("noise must lie in the open interval (0, 1)")
    noise = np.log(u) - np.log1p(-u)
    s = tc.sigmoid((log_alpha + noise) * (1.0 / beta))
    return tc.clamp(s * (hi - lo) + lo, 0.0, 1.0)


def hard_concrete_eval(log_alpha: Tensor, lo: float = DEFAULT_STRETCH_LO,
                       hi: float = DEFAULT_STRETCH_HI) -> Tensor:
    """Deterministic gate: the stretched sigmoid of ``log_alpha``, clamped."""
    return tc.clamp(tc.sigmoid(log_alpha) * (hi - lo) + lo, 0.0, 1.0)


def hard_concrete_prob_nonzero(log_alpha: Tensor, beta: float = DEFAULT_BETA,
                               lo: float = DEFAULT_STRETCH_LO, hi: float = DEFAULT_STRETCH_HI) -> Tensor:
    """Closed-form ``P(z > 0) = sigmoid(log_alpha - beta * log(-lo / hi))``."""
    _check_stretch(lo, hi)
    return tc.sigmoid(log_alpha - beta * math.log(-lo / hi))


class GateSet:
    """Per-owner ``log_alpha`` vectors sharing one set of Hard Concrete constants.

    ``slices`` maps an owner path (layer path) to its number of gates; group
    ids run over owners in insertion order, then gate index.
    """

    def __init__(self, slices: Mapping[str, int], beta: float = DEFAULT_BETA,
                 stretch_lo: float = DEFAULT_STRETCH_LO, stretch_hi: float = DEFAULT_STRETCH_HI,
                 init_log_alpha: float = DEFAULT_INIT_LOG_ALPHA,
                 counts: Mapping[str, np.ndarray] | None = None, mode: str = "train"):
        _check_stretch(stretch_lo, stretch_hi)
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.stretch_lo = float(stretch_lo)
        self.stretch_hi = float(stretch_hi)
        self.mode = mode
        self.log_alpha: dict[str, Tensor] = {
            owner: Tensor(np.full(n, float(init_log_alpha)), requires_grad=True) for owner, n in slices.items()
        }
        counts = counts or {owner: np.ones(n) for owner, n in slices.items()}
        self.counts = {owner: np.asarray(counts[owner], dtype=np.float64) for owner in self.log_alpha}
        self._stream = {owner: i for i, owner in enumerate(self.log_alpha)}

    @classmethod
    def from_groups(cls, groups: Sequence[PruneGroup], **kw) -> "GateSet":
        slices: dict[str, int] = {}
        counts: dict[str, list[int]] = {}
        for g in sorted(groups, key=lambda g: g.id):
            slices[g.owner] = slices.get(g.owner, 0) + 1
            counts.setdefault(g.owner, []).append(g.param_count)
        return cls(slices, counts={k: np.array(v) for k, v in counts.items()}, **kw)

    @property
    def owners(self) -> list[str]:
        return list(self.log_alpha)

    def __len__(self) -> int:
        return sum(t.size for t in self.log_alpha.values())

    def parameters(self) -> list[Tensor]:
        return list(self.log_alpha.values())

    def flat_log_alpha(self) -> np.ndarray:
        return np.concatenate([t.data for t in self.log_alpha.values()])

    def train(self) -> "GateSet":
        self.mode = "train"
        return self

    def eval(self) -> "GateSet":
        self.mode = "eval"
        return self

    def sample(self, rng: CounterRNG, step: int) -> dict[str, Tensor]:
        """One Hard Concrete draw per group, keyed by ``(seed, step, owner)``."""
        if self.mode != "train":
            raise RuntimeError("sample_gates requires train mode; use eval_gates for inference")
        return {owner: hard_concrete_sample(la, rng.uniform_open(step, self._stream[owner], la.shape),
                                            self.beta, self.stretch_lo, self.stretch_hi)
                for owner, la in self.log_alpha.items()}

    def deterministic(self) -> dict[str, Tensor]:
        return {owner: hard_concrete_eval(la, self.stretch_lo, self.stretch_hi)
                for owner, la in self.log_alpha.items()}

    def prob_nonzero(self) -> dict[str, Tensor]:
        return {owner: hard_concrete_prob_nonzero(la, self.beta, self.stretch_lo, self.stretch_hi)
                for owner, la in self.log_alpha.items()}

    def expected_sparsity(self) -> Tensor:
        """Parameter-weighted expected fraction of pruned parameters."""
        p = self.prob_nonzero()
        total = sum(float(c.sum()) for c in self.counts.values())
        kept = None
        for owner, pj in p.items():
            term = tc.sum_(pj * self.counts[owner])
            kept = term if kept is None else kept + term
        return 1.0 - kept * (1.0 / total)

    def state(self) -> dict[str, np.ndarray]:
        return {f"gates/{owner.replace('.', '/')}/log_alpha": la.data.copy() for owner, la in self.log_alpha.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for owner, la in self.log_alpha.items():
            arr = np.asarray(state[f"gates/{owner.replace('.', '/')}/log_alpha"])
            if arr.shape != la.shape:
                raise ValueError(f"gate slice {owner!r}: shape {arr.shape} != {la.shape}")
            la.data = arr.astype(la.dtype, copy=True)


def sample_gates(gates: GateSet, rng: CounterRNG, step: int = 0) -> dict[str, Tensor]:
    return gates.sample(rng, step)


def eval_gates(gates: GateSet) -> dict[str, Tensor]:
    return gates.deterministic()


def prob_nonzero(gates: GateSet) -> dict[str, Tensor]:
    return gates.prob_nonzero()


def current_sparsity(groups: Sequence[PruneGroup], p) -> Tensor:
    """``1 - sum_j p_j * count_j / sum_j count_j``.

    ``p`` is either a vector aligned with ``groups`` or a mapping owner -> vector
    indexed by :attr:`PruneGroup.index`.
    """
    if not groups:
        raise ValueError("current_sparsity needs at least one prune group")
    if isinstance(p, Mapping):
        by_owner: dict[str, list[tuple[int, int]]] = {}
        for g in groups:
            by_owner.setdefault(g.owner, []).append((g.index, g.param_count))
        total = float(sum(g.param_count for g in groups))
        kept = None
        for owner, items in by_owner.items():
            idx = np.array([i for i, _ in items])
            cnt = np.array([c for _, c in items], dtype=np.float64)
            pj = p[owner]
            pj = pj if isinstance(pj, Tensor) else Tensor(pj)
            term = tc.sum_(tc.getitem(pj, idx) * cnt)
            kept = term if kept is None else kept + term
        return 1.0 - kept * (1.0 / total)
    p = p if isinstance(p, Tensor) else Tensor(p)
    counts = np.array([g.param_count for g in groups], dtype=np.float64)
    if p.shape != counts.shape:
        raise ValueError(f"p has shape {p.shape}, expected ({len(groups)},)")
    return 1.0 - tc.sum_(p * counts) * (1.0 / counts.sum())


def l0_fixed_penalty(gates: GateSet, weight: float) -> Tensor:
    """Fixed-weight expected L0 term, normalized by the prunable parameter total."""
    return (1.0 - gates.expected_sparsity()) * weight


@dataclass
class TargetSchedule:
    """Linear ramp of the sparsity target from ``start`` to ``end``."""

    end: float
    warmup_steps: int
    start: float = 0.0

    def at(self, step: int) -> float:
        if self.warmup_steps <= 0 or step >= self.warmup_steps:
            return self.end
        return self.start + (self.end - self.start) * max(step, 0) / self.warmup_steps


@dataclass
class LagrangianState:
    target: float
    schedule: TargetSchedule
    lambda1: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    lambda2: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target <= 1.0:
            raise ValueError(f"target sparsity must lie in [0, 1], got {self.target}")

    @classmethod
    def create(cls, target: float, warmup_steps: int, start: float = 0.0) -> "LagrangianState":
        return cls(target, TargetSchedule(target, warmup_steps, start))

    def scheduled_target(self, step: int | None = None) -> float:
        return self.schedule.at(self.step if step is None else step)

    def state(self) -> dict[str, np.ndarray]:
        return {"lagrangian/lambda1": self.lambda1.data.copy(),
                "lagrangian/lambda2": self.lambda2.data.copy(),
                "lagrangian/t": np.asarray(self.target, dtype=np.float64)}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.lambda1.data = np.asarray(state["lagrangian/lambda1"], dtype=np.float64).copy()
        self.lambda2.data = np.asarray(state["lagrangian/lambda2"], dtype=np.float64).copy()
        self.target = float(state["lagrangian/t"])


def lagrangian_penalty(state: LagrangianState, s: Tensor | float, step: int | None = None) -> Tensor:
    """``lambda1 * (s - t) + lambda2 * (s - t)**2`` at the scheduled target."""
    gap = tc.sub(s, state.scheduled_target(step))
    return state.lambda1 * gap + state.lambda2 * (gap * gap)


def update_multipliers(state: LagrangianState, lr: float, grads: tuple | None = None) -> LagrangianState:
    """Gradient ascent on the multipliers (they are left unconstrained)."""
    if grads is None:
        grads = (state.lambda1.grad, state.lambda2.grad)
    g1, g2 = (0.0 if g is None else float(np.asarray(g).reshape(-1)[0]) for g in grads)
    if not (math.isfinite(g1) and math.isfinite(g2)):
        raise FloatingPointError(f"non-finite multiplier gradient ({g1}, {g2}) at step {state.step}")
    state.lambda1.data = state.lambda1.data + lr * g1
    state.lambda2.data = state.lambda2.data + lr * g2
    state.lambda1.grad = None
    state.lambda2.grad = None
    state.step += 1
    return state
