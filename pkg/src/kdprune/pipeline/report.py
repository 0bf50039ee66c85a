"""Parameter census, analytic FLOPs and compression reports.

FLOPs count one multiply-add as 2 and cover one encoder forward at a
reference length ``T``: dense maps ``2*T*weights``, attention scores plus
context ``4*T^2*head_dim*heads`` and depthwise convolution ``2*T*C*K``.
Norms, activations and biases are not counted.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from ..lowrank import FactorizedLinear
from ..models.groups import _encoder_of, block_census, prunable_census
from ..nn import Module

TABLE3_ROWS = (("causal", "causal"), ("non-causal", "noncausal"))


def dense_flops(layer: Module, T: int) -> int:
    return 2 * T * layer.dense_weight_count()


def encoder_flops(model: Module, T: int) -> int:
    enc = _encoder_of(model)
    total = 2 * T * enc.frontend.dense_weight_count()
    for layer in enc.layers:
        total += sum(dense_flops(d, T) for d in layer.dense_layers())
        total += 4 * T * T * layer.attn.head_dim * layer.attn.heads
        total += 2 * T * layer.conv.channels * layer.conv.dw_weight.shape[1]
    return total


def census_and_flops(model: Module, ref_len: int = 100) -> dict:
    """Exact per-block parameter counts, prunable census and encoder MFLOPs."""
    blocks = block_census(model)
    enc = _encoder_of(model)
    return {
        "blocks": blocks,
        "encoder_params": blocks["causal"] + blocks["noncausal"] + blocks["frontend"],
        "total_params": sum(blocks.values()),
        "prunable_params": prunable_census(model),
        "factorized": isinstance(enc.layers[0].ffn1.fc_in, FactorizedLinear),
        "flops": encoder_flops(model, ref_len),
        "mflops": encoder_flops(model, ref_len) / 1e6,
        "ref_len": ref_len,
    }


def retained_pct(after: dict, baseline: dict) -> dict[str, float]:
    return {block: 100.0 * after["blocks"][block] / baseline["blocks"][block] for _, block in TABLE3_ROWS}


def achieved_sparsity(original_prunable: int, compact_prunable: int) -> Fraction:
    """``1 - compact / original`` as an exact fraction."""
    return 1 - Fraction(compact_prunable, original_prunable)


@dataclass
class CompressionReport:
    method: str
    scenario: str
    teacher_mode: str
    target_sparsity: float
    retained_pct: dict[str, float]
    params_before: int
    params_after: int
    prunable_before: int
    prunable_after: int
    achieved_sparsity: float
    achieved_sparsity_fraction: str
    expected_sparsity: float | None
    mflops_before: float
    mflops_after: float
    ref_len: int
    ter: dict[str, float] = field(default_factory=dict)
    untrained_ter: dict[str, float] = field(default_factory=dict)
    recorded_losses: dict[str, float] = field(default_factory=dict)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)

    @property
    def column(self) -> str:
        return f"{self.method}/{self.scenario}"

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "CompressionReport":
        return cls(**json.loads(Path(path).read_text()))


def build_report(cfg, baseline: dict, gated: dict, compact: dict, expected_sparsity: float | None,
                 ter=None, untrained_ter=None, recorded_losses=None, loss_curves=None,
                 scenario: str | None = None) -> CompressionReport:
    """``baseline`` is the dense teacher census, ``gated`` the student the gates were
    attached to (the factorized copy for LRF), ``compact`` the surgeon output."""
    frac = achieved_sparsity(gated["prunable_params"], compact["prunable_params"])
    return CompressionReport(
        method=cfg.method,
        scenario=scenario or cfg.pipeline.scenario,
        teacher_mode=cfg.pipeline.teacher_mode,
        target_sparsity=cfg.gates.target_sparsity,
        retained_pct=retained_pct(compact, baseline),
        params_before=baseline["encoder_params"],
        params_after=compact["encoder_params"],
        prunable_before=gated["prunable_params"],
        prunable_after=compact["prunable_params"],
        achieved_sparsity=float(frac),
        achieved_sparsity_fraction=f"{frac.numerator}/{frac.denominator}",
        expected_sparsity=expected_sparsity,
        mflops_before=baseline["mflops"],
        mflops_after=compact["mflops"],
        ref_len=baseline["ref_len"],
        ter=dict(ter or {}),
        untrained_ter=dict(untrained_ter or {}),
        recorded_losses=dict(recorded_losses or {}),
        loss_curves={k: list(v) for k, v in (loss_curves or {}).items()},
    )


def table3_csv(reports: Sequence[CompressionReport]) -> str:
    """Retained-parameter percentages: rows causal / non-causal, one column per method x scenario."""
    cols = []
    by_col = {}
    for r in reports:
        if r.column not in by_col:
            cols.append(r.column)
        by_col[r.column] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block"] + cols)
    for label, key in TABLE3_ROWS:
        w.writerow([label] + [f"{by_col[c].retained_pct[key]:.1f}" for c in cols])
    return buf.getvalue()
