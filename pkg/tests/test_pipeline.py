from fractions import Fraction

import numpy as np
import pytest

from kdprune import tensor as tc
from kdprune.data import generate_corpus, make_batch
from kdprune.distill import DistillSpec, kd_encoder_loss
from kdprune.models.transducer import ContractError
from kdprune.nn import Linear
from kdprune.pipeline.io import PretextModel, model_tensors
from kdprune.pipeline.loop import DivergenceError, MetricsLog, TeacherCache, check_finite, smoothed
from kdprune.pipeline.report import (CompressionReport, achieved_sparsity, census_and_flops, dense_flops,
                                     table3_csv)
from kdprune.pipeline.stages import (_penalty, joint_student, joint_task_loss, make_gates, stage1_distill_prune,
                                     stage2_refine, two_stage)
from kdprune.pipeline.teacher import RandomProjectionQuantizer, span_mask
from kdprune.tensor import CounterRNG, Tensor


def _teacher(cfg):
    return PretextModel(cfg.model, cfg.pretrain.n_codes, cfg.seed)


def test_stage2_zero_steps_is_identity(small_run_cfg):
    cfg = small_run_cfg("pipeline.steps_stage2=0")
    t = _teacher(cfg)
    train = generate_corpus(cfg.data)["train"]
    s2 = stage2_refine(cfg, t, t, train)
    a, b = model_tensors(t), model_tensors(s2.model)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_stage2_student_equal_to_teacher_stays_at_zero(small_run_cfg):
    cfg = small_run_cfg("pipeline.steps_stage2=25", "optim.weight_decay=0.0", "distill.cache_teacher=false")
    t = _teacher(cfg)
    s2 = stage2_refine(cfg, t, t, generate_corpus(cfg.data)["train"])
    assert max(s2.curves["distill"]) <= 1e-8


def test_zero_target_is_plain_distillation(small_run_cfg):
    cfg = small_run_cfg("gates.target_sparsity=0.0", "pipeline.steps_stage1=60")
    s1 = stage1_distill_prune(cfg, _teacher(cfg), generate_corpus(cfg.data)["train"])
    assert s1.expected_sparsity <= 0.02


@pytest.mark.parametrize("method", ["l0", "lrf"])
def test_two_stage_shapes_and_budgets(small_run_cfg, method):
    cfg = small_run_cfg(f"gates.method={method}", "gates.target_sparsity=0.5")
    t = _teacher(cfg)
    s1, compact, s2 = two_stage(cfg, t, generate_corpus(cfg.data)["train"])
    assert len(s1.curves["loss"]) == 30 and len(s2.curves["loss"]) == 15
    assert census_and_flops(s2.model)["total_params"] == census_and_flops(compact)["total_params"]
    assert set(s1.curves) >= {"expected_sparsity", "target", "lambda1", "lambda2", "distill", "penalty"}


def test_pretext_arm_without_kd(small_run_cfg):
    cfg = small_run_cfg("distill.use_kd=false", "gates.method=l0")
    s1 = stage1_distill_prune(cfg, _teacher(cfg), generate_corpus(cfg.data)["train"])
    assert "pretext" in s1.curves and "distill" not in s1.curves


def test_combined_joint_loss_is_additive_at_step_zero(small_run_cfg):
    cfg = small_run_cfg("distill.kd_weight=0.7")
    t = _teacher(cfg)
    train = generate_corpus(cfg.data)["train"]
    student = joint_student(cfg, t.encoder)
    gates = make_gates(cfg, student).train()
    b = make_batch(train[:4])
    z = gates.sample(CounterRNG(cfg.seed), 0)
    from kdprune.gates import LagrangianState
    lag = LagrangianState.create(0.5, 10)
    lag.lambda1.data, lag.lambda2.data = np.asarray(0.3), np.asarray(0.2)
    loss, parts = joint_task_loss(cfg, student, b, TeacherCache(t.encoder, train), z)
    pen, _ = _penalty(cfg, gates, lag, 5)
    out = student.encoder(b.feats, b.lengths, z)
    rnnt = student.loss(b.feats, b.lengths, b.targets, b.target_lengths, enc_out=out)[0]
    tout = t.encoder(b.feats, b.lengths)
    kd = kd_encoder_loss((tout.causal, tout.noncausal), (out.causal, out.noncausal), DistillSpec([]), out.frame_mask)
    total = float((loss + pen).data)
    assert total == pytest.approx(float(rnnt.data) + 0.7 * float(kd.data) + float(pen.data), abs=1e-10)


def test_masking_rate_zero_is_contract_error():
    with pytest.raises(ContractError):
        span_mask(np.array([5]), 5, 0.0, 3, np.random.default_rng(0))


def test_span_mask_respects_lengths_and_is_never_empty():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = span_mask(np.array([3, 1]), 6, 0.01, 3, rng)
        assert m.any() and not m[0, 3:].any() and not m[1, 1:].any()


def test_quantizer_is_deterministic():
    q1, q2 = RandomProjectionQuantizer(16, 8, 32, 0), RandomProjectionQuantizer(16, 8, 32, 0)
    x = np.random.default_rng(3).normal(size=(10, 16))
    np.testing.assert_array_equal(q1(x), q1(x))
    np.testing.assert_array_equal(q1(x), q2(x))
    assert len(np.unique(q1.codebook, axis=0)) == 32


def test_dense_flops_convention():
    assert dense_flops(Linear(1024, 1024, np.random.default_rng(0)), 1) == 2 * 1024 * 1024
    assert dense_flops(Linear(1024, 1024, np.random.default_rng(0)), 1) / 1e6 == pytest.approx(2.097, abs=5e-4)


def test_achieved_sparsity_is_exact():
    assert achieved_sparsity(3000, 1000) == Fraction(2, 3)
    assert achieved_sparsity(7, 7) == 0


def _report(col_method, scenario, causal, noncausal):
    return CompressionReport(col_method, scenario, "pt_encoder", 0.5, {"causal": causal, "noncausal": noncausal},
                             10, 5, 8, 4, 0.5, "1/2", 0.5, 1.0, 0.5, 100)


def test_table3_layout():
    text = table3_csv([_report("l0", "task_agnostic", 41.234, 60.0), _report("lrf", "task_specific", 55.55, 12.0)])
    assert text.splitlines() == ["block,l0/task_agnostic,lrf/task_specific", "causal,41.2,55.5",
                                 "non-causal,60.0,12.0"]


def test_report_json_roundtrip(tmp_path):
    r = _report("l0", "task_agnostic", 1.0, 2.0)
    r.write(tmp_path / "r.json")
    assert CompressionReport.read(tmp_path / "r.json") == r


def test_metrics_log_cadence(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl", every=5, last_step=12)
    for s in range(1, 13):
        log.maybe(s, loss=float(s))
    steps = [int(line.split('"step": ')[1].split("}")[0].split(",")[0])
             for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert steps == [1, 5, 10, 12]


def test_divergence_is_reported_with_step():
    with pytest.raises(DivergenceError, match="step 7"):
        check_finite(Tensor(np.asarray(np.nan)), 7, "stage1", {"distill": 1.0})


def test_smoothing_is_trailing_mean():
    np.testing.assert_allclose(smoothed([1.0, 3.0, 5.0], 2), [1.0, 2.0, 4.0])


def test_teacher_cache_matches_direct_forward(small_run_cfg):
    cfg = small_run_cfg()
    t = _teacher(cfg)
    utts = generate_corpus(cfg.data)["train"][:6]
    cache = TeacherCache(t.encoder, utts, batch_size=4)
    idx = np.array([5, 0, 2])
    b = make_batch([utts[i] for i in idx], idx)
    with tc.no_grad():
        out = t.encoder(b.feats, b.lengths)
    for got, ref in zip(cache.batch_layers(b), out.layers):
        m = b.lengths[:, None] > np.arange(b.feats.shape[1])[None]
        assert np.abs((got - ref.data)[m]).max() <= 1e-12


@pytest.mark.slow
def test_default_pretext_run_reduces_masked_ce(pt_teacher_dir):
    import json

    rep = json.loads((pt_teacher_dir / "report.json").read_text())
    assert rep["steps"] == 2000
    assert rep["ce_reduction"] >= 0.30
