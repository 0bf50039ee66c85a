"""Stage-1 distill-prune, Stage-2 refinement and joint prune-and-finetune."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as tc
from ..config import RunConfig
from ..data import Batch, BatchSampler, Utterance, fixed_batches
from ..distill import DistillSpec, cascaded_layer_selection, distill_loss, kd_encoder_loss
from ..gates import GateSet, LagrangianState, l0_fixed_penalty, lagrangian_penalty, update_multipliers
from ..models.groups import build_prune_groups, factorize_encoder
from ..models.transducer import TransducerModel
from ..nn import Module
from ..optim import ParamGroup
from ..tensor import CounterRNG
from .io import PretextModel
from .loop import MetricsLog, TeacherCache, check_finite, teacher_features
from .surgeon import surgeon
from .teacher import PretextBatchMaker, RandomProjectionQuantizer, default_optimizer, masked_code_loss


EVAL_STEP_OFFSET = 1 << 30


@dataclass
class StageResult:
    model: Module
    gates: GateSet | None = None
    lagrangian: LagrangianState | None = None
    zhat: dict | None = None
    curves: dict[str, list[float]] = field(default_factory=dict)
    expected_sparsity: float | None = None
    steps: int = 0


def distill_spec(cfg: RunConfig) -> DistillSpec:
    d = cfg.distill
    layers = cascaded_layer_selection(cfg.model.causal_layers, cfg.model.noncausal_layers, d.layer_rule, d.stride)
    return DistillSpec([(i, i) for i in layers], d.weight_l1, d.weight_cos)


def make_quantizer(cfg: RunConfig) -> RandomProjectionQuantizer:
    p = cfg.pretrain
    return RandomProjectionQuantizer(cfg.model.input_dim, p.code_dim, p.n_codes, cfg.seed)


def init_student(teacher: Module, method: str) -> Module:
    """Copy of the teacher; for LRF every prunable dense layer is factorized."""
    return factorize_encoder(teacher) if method == "lrf" else teacher.clone()


def make_gates(cfg: RunConfig, student: Module) -> GateSet:
    g = cfg.gates
    groups = build_prune_groups(student, cfg.method)
    return GateSet.from_groups(groups, beta=g.beta, stretch_lo=g.stretch_lo, stretch_hi=g.stretch_hi,
                               init_log_alpha=g.init_log_alpha)


def _penalty(cfg: RunConfig, gates: GateSet, lag: LagrangianState, step: int):
    s = gates.expected_sparsity()
    if cfg.gates.penalty_mode == "fixed":
        return l0_fixed_penalty(gates, cfg.gates.fixed_weight), s
    return lagrangian_penalty(lag, s, step), s


class _Trainer:
    """Step bookkeeping shared by the gated loops."""

    def __init__(self, cfg: RunConfig, student: Module, steps: int, gated: bool, log: MetricsLog | None,
                 stage: str, extra_params=()):
        self.cfg, self.student, self.steps, self.stage, self.log = cfg, student, steps, stage, log
        self.gates = make_gates(cfg, student).train() if gated else None
        self.lag = None
        extra = []
        if gated:
            warm = int(round(steps * cfg.gates.warmup_fraction))
            self.lag = LagrangianState.create(cfg.gates.target_sparsity, warm)
            extra.append(ParamGroup(self.gates.parameters(), cfg.gates.lr, 0.0, scheduled=False))
        params = list(student.parameters()) + list(extra_params)
        self.opt = default_optimizer(cfg, params, extra)
        self.rng = CounterRNG(cfg.seed)
        self.curves: dict[str, list[float]] = {}

    def gate_sample(self, step: int):
        return None if self.gates is None else self.gates.sample(self.rng, step)

    def finish_step(self, step: int, task_loss, parts: dict) -> None:
        total = task_loss
        s = None
        if self.gates is not None:
            pen, s = _penalty(self.cfg, self.gates, self.lag, step)
            total = total + pen
            parts["penalty"] = pen
        check_finite(total, step, self.stage, parts)
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        record = {"loss": float(total.data)}
        record.update({k: float(getattr(v, "data", v)) for k, v in parts.items()})
        if s is not None:
            record["expected_sparsity"] = float(s.data)
            record["target"] = self.lag.scheduled_target(step)
            record["lambda1"] = float(self.lag.lambda1.data)
            record["lambda2"] = float(self.lag.lambda2.data)
            if self.cfg.gates.penalty_mode == "lagrangian":
                update_multipliers(self.lag, self.cfg.gates.lambda_lr)
        for k, v in record.items():
            self.curves.setdefault(k, []).append(v)
        if self.log is not None:
            self.log.maybe(step, stage=self.stage, lr=self.opt.lr(self.opt.groups[0]), **record)

    def result(self) -> StageResult:
        res = StageResult(self.student, self.gates, self.lag, curves=self.curves, steps=self.steps)
        if self.gates is not None:
            self.gates.eval()
            res.zhat = {k: v.data.copy() for k, v in self.gates.deterministic().items()}
            res.expected_sparsity = float(self.gates.expected_sparsity().data)
        return res


def _two_stage_loss(cfg, student: PretextModel, batch: Batch, step: int, cache: TeacherCache | None,
                    spec: DistillSpec, quant, masker, gates):
    parts: dict = {}
    if cfg.distill.use_kd:
        out = student.encoder(batch.feats, batch.lengths, gates)
        loss = distill_loss(spec, cache.batch_layers(batch), out.layers, out.frame_mask, parts)
        parts["distill"] = float(loss.data)
    else:
        mask, noise = masker(batch, step)
        loss, _ = masked_code_loss(student, batch, quant, mask, noise, gates)
        parts["pretext"] = float(loss.data)
    return loss, parts


def stage1_distill_prune(cfg: RunConfig, teacher: PretextModel, train: list[Utterance],
                         log: MetricsLog | None = None, cache: TeacherCache | None = None) -> StageResult:
    """Gated student trained to match teacher layers under the sparsity constraint."""
    student = init_student(teacher, cfg.method)
    steps = cfg.pipeline.steps_stage1
    tr = _Trainer(cfg, student, steps, True, log, "stage1")
    spec = distill_spec(cfg)
    if cfg.distill.use_kd and cache is None:
        cache = teacher_features(teacher.encoder, train, cfg.distill.cache_teacher)
    quant, masker = make_quantizer(cfg), PretextBatchMaker(cfg)
    stream = BatchSampler(train, cfg.data.batch_size, cfg.seed).stream()
    for step in range(1, steps + 1):
        batch = next(stream)
        loss, parts = _two_stage_loss(cfg, student, batch, step, cache, spec, quant, masker, tr.gate_sample(step))
        tr.finish_step(step, loss, parts)
    return tr.result()


def stage2_refine(cfg: RunConfig, teacher: PretextModel, compact: PretextModel, train: list[Utterance],
                  log: MetricsLog | None = None, cache: TeacherCache | None = None) -> StageResult:
    """Distillation-only training of the compact student (no gates, no penalty)."""
    student = compact.clone()
    steps = cfg.steps_stage2
    tr = _Trainer(cfg, student, steps, False, log, "stage2")
    spec = distill_spec(cfg)
    if cfg.distill.use_kd and cache is None:
        cache = teacher_features(teacher.encoder, train, cfg.distill.cache_teacher)
    quant, masker = make_quantizer(cfg), PretextBatchMaker(cfg)
    stream = BatchSampler(train, cfg.data.batch_size, cfg.seed + 2).stream()
    for step in range(1, steps + 1):
        batch = next(stream)
        loss, parts = _two_stage_loss(cfg, student, batch, step, cache, spec, quant, masker, None)
        tr.finish_step(step, loss, parts)
    return tr.result()


def two_stage(cfg: RunConfig, teacher: PretextModel, train: list[Utterance], log: MetricsLog | None = None):
    """Stage 1, surgeon, Stage 2.  Returns ``(stage1, compact, stage2)``."""
    cache = teacher_features(teacher.encoder, train, cfg.distill.cache_teacher) if cfg.distill.use_kd else None
    s1 = stage1_distill_prune(cfg, teacher, train, log, cache)
    compact = surgeon(s1.model, s1.zhat)
    s2 = stage2_refine(cfg, teacher, compact, train, log, cache)
    return s1, compact, s2


def joint_student(cfg: RunConfig, pt_encoder: Module) -> TransducerModel:
    m = cfg.model
    enc = pt_encoder.clone()
    enc.assign_paths("encoder")
    model = TransducerModel(m, m.pred_dim, m.joint_dim, cfg.seed, encoder=enc)
    if cfg.method == "lrf":
        model = factorize_encoder(model)
    return model


def joint_prune_finetune(cfg: RunConfig, pt_encoder: Module, teacher_encoder: Module, train: list[Utterance],
                         log: MetricsLog | None = None) -> tuple[StageResult, TransducerModel]:
    """Transducer loss + encoder-output KD + sparsity penalty, then the surgeon.

    The student encoder starts from the pretext-trained encoder whatever the
    teacher mode; ``teacher_encoder`` is the PT or the PTFT encoder.
    """
    student = joint_student(cfg, pt_encoder)
    steps = cfg.pipeline.steps_joint
    tr = _Trainer(cfg, student, steps, cfg.gates.target_sparsity > 0 or cfg.gates.penalty_mode == "fixed",
                  log, "joint")
    cache = teacher_features(teacher_encoder, train, cfg.distill.cache_teacher) if cfg.distill.use_kd else None
    stream = BatchSampler(train, cfg.data.batch_size, cfg.seed + 3).stream()
    for step in range(1, steps + 1):
        b = next(stream)
        loss, parts = joint_task_loss(cfg, student, b, cache, tr.gate_sample(step))
        tr.finish_step(step, loss, parts)
    res = tr.result()
    compact = surgeon(student, res.zhat) if res.zhat is not None else student.clone()
    return res, compact


def joint_task_loss(cfg: RunConfig, student: TransducerModel, b: Batch, cache: TeacherCache | None, gates):
    """Transducer loss plus weighted encoder-output KD (without the penalty)."""
    rnnt, out, parts = student.loss(b.feats, b.lengths, b.targets, b.target_lengths, gates)
    loss = rnnt
    parts = {"rnnt": rnnt, **parts}
    if cache is not None:
        dspec = DistillSpec([], cfg.distill.weight_l1, cfg.distill.weight_cos)
        kd = kd_encoder_loss(cache.taps(b), (out.causal, out.noncausal), dspec, out.frame_mask)
        parts["kd"] = kd
        loss = loss + kd * cfg.distill.kd_weight
    return loss, parts


# ---------------------------------------------------------------------------
# held-out loss snapshots, used to verify that checkpoints reload exactly
# ---------------------------------------------------------------------------

def eval_two_stage_losses(cfg: RunConfig, teacher: PretextModel, student: PretextModel,
                          utts: list[Utterance]) -> dict[str, float]:
    spec = distill_spec(cfg)
    quant, masker = make_quantizer(cfg), PretextBatchMaker(cfg)
    cache = TeacherCache(teacher.encoder, utts)
    out: dict[str, float] = {"distill": 0.0, "pretext": 0.0}
    batches = fixed_batches(utts, cfg.pipeline.eval_batch_size)
    with tc.no_grad():
        for k, b in enumerate(batches):
            enc = student.encoder(b.feats, b.lengths)
            out["distill"] += float(distill_loss(spec, cache.batch_layers(b), enc.layers, enc.frame_mask).data)
            # held-out masks use steps beyond any training budget
            mask, noise = masker(b, EVAL_STEP_OFFSET + k)
            out["pretext"] += float(masked_code_loss(student, b, quant, mask, noise)[0].data)
    return {k: v / len(batches) for k, v in out.items()}


def eval_joint_losses(cfg: RunConfig, student: TransducerModel, teacher_encoder: Module | None,
                      utts: list[Utterance]) -> dict[str, float]:
    cache = TeacherCache(teacher_encoder, utts) if teacher_encoder is not None else None
    totals: dict[str, float] = {}
    batches = fixed_batches(utts, cfg.pipeline.eval_batch_size)
    with tc.no_grad():
        for b in batches:
            _, parts = joint_task_loss(cfg, student, b, cache, None)
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + float(v.data)
    return {k: v / len(batches) for k, v in totals.items()}
