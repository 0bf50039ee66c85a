"""Layer-wise feature distillation between a frozen teacher and a student."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .nn import Linear
from .tensor import Tensor


class DistillContractError(ValueError):
    pass


def select_layers(total_layers: int, rule: str = "stride", stride: int = 5) -> list[int]:
    """1-based layer indices to distill; the first and last layer are always kept.

    ``"stride"`` keeps every ``stride``-th layer (24 layers, stride 5 ->
    1, 5, 10, 15, 20, 24); ``"first_middle_last"`` keeps 1, ceil(total/2), total.
    """
    if total_layers < 2:
        raise ValueError("layer selection needs at least two layers")
    if rule == "stride":
        picked = {1, total_layers} | set(range(stride, total_layers + 1, stride))
    elif rule == "first_middle_last":
        picked = {1, (total_layers + 1) // 2, total_layers}
    else:
        raise ValueError(f"unknown layer-selection rule {rule!r}")
    return sorted(picked)


def cascaded_layer_selection(causal_layers: int, noncausal_layers: int, rule: str = "first_middle_last",
                             stride: int = 5) -> list[int]:
    """Apply :func:`select_layers` per encoder block; returns global 1-based indices.

    A one-layer block contributes its single layer.
    """
    out = []
    for offset, n in ((0, causal_layers), (causal_layers, noncausal_layers)):
        picked = [1] if n == 1 else select_layers(n, rule, stride)
        out.extend(offset + i for i in picked)
    return out


@dataclass
class DistillSpec:
    layer_pairs: list[tuple[int, int]]
    weight_l1: float = 0.5
    weight_cos: float = 0.5
    projections: dict[int, Linear] = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_l1 < 0 or self.weight_cos < 0:
            raise ValueError("distillation weights must be non-negative")

    @classmethod
    def same_layers(cls, layers: Sequence[int], **kw) -> "DistillSpec":
        return cls([(i, i) for i in layers], **kw)

    def validate(self, n_teacher: int, n_student: int) -> None:
        for t, s in self.layer_pairs:
            if not (1 <= t <= n_teacher and 1 <= s <= n_student):
                raise DistillContractError(f"layer pair ({t}, {s}) outside ({n_teacher}, {n_student}) layers")

    def parameters(self) -> list[Tensor]:
        return [p for proj in self.projections.values() for p in proj.parameters()]


def _frozen(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def pair_loss(teacher: Tensor | np.ndarray, student: Tensor, frame_mask: np.ndarray | None = None,
              weight_l1: float = 0.5, weight_cos: float = 0.5) -> tuple[Tensor, dict[str, float]]:
    """``w_l1 * mean|t - s| + w_cos * mean_frames(1 - cos(t, s))`` over valid frames."""
    t = _frozen(teacher)
    if t.shape[:-1] != student.shape[:-1]:
        raise DistillContractError(f"teacher frames {t.shape} and student frames {student.shape} disagree")
    if frame_mask is None:
        l1 = tc.l1_mean(student, t)
        cos_term = 1.0 - tc.mean(tc.cosine(student, t, axis=-1))
    else:
        m = np.asarray(frame_mask, dtype=student.dtype)
        l1 = tc.l1_mean(student, t, weights=m[..., None])
        cos_term = 1.0 - tc.sum_(tc.cosine(student, t, axis=-1) * m) * (1.0 / m.sum())
    total = l1 * weight_l1 + cos_term * weight_cos
    return total, {"l1": float(l1.data), "cos": float(cos_term.data)}


def distill_loss(spec: DistillSpec, teacher_feats: Sequence | Mapping, student_feats: Sequence | Mapping,
                 frame_mask: np.ndarray | None = None, components: dict | None = None) -> Tensor:
    """Mean over layer pairs of :func:`pair_loss`.  Feature lists are 0-indexed by
    layer position (layer ``i`` is ``feats[i - 1]``) unless given as mappings."""

    def pick(feats, i):
        return feats[i] if isinstance(feats, Mapping) else feats[i - 1]

    if not spec.layer_pairs:
        raise DistillContractError("no layer pairs to distill")
    total = None
    for k, (ti, si) in enumerate(spec.layer_pairs):
        s = pick(student_feats, si)
        if k in spec.projections:
            s = spec.projections[k](s)
        loss, parts = pair_loss(pick(teacher_feats, ti), s, frame_mask, spec.weight_l1, spec.weight_cos)
        if components is not None:
            components[f"pair{ti}_{si}/l1"] = parts["l1"]
            components[f"pair{ti}_{si}/cos"] = parts["cos"]
        total = loss if total is None else total + loss
    return total * (1.0 / len(spec.layer_pairs))


def kd_encoder_loss(teacher_outs: tuple, student_outs: tuple, spec: DistillSpec | None = None,
                    frame_mask: np.ndarray | None = None, components: dict | None = None) -> Tensor:
    """Average of the causal-tap and non-causal-tap feature losses."""
    w1 = 0.5 if spec is None else spec.weight_l1
    w2 = 0.5 if spec is None else spec.weight_cos
    losses = []
    for name, t, s in zip(("causal", "noncausal"), teacher_outs, student_outs):
        loss, parts = pair_loss(t, s, frame_mask, w1, w2)
        if components is not None:
            components[f"kd_{name}/l1"] = parts["l1"]
            components[f"kd_{name}/cos"] = parts["cos"]
        losses.append(loss)
    return (losses[0] + losses[1]) * 0.5
