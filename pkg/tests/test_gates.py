import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdprune import tensor as tc
from kdprune.gates import (GateSet, LagrangianState, PruneGroup, TargetSchedule, current_sparsity,
                           hard_concrete_eval, hard_concrete_prob_nonzero, hard_concrete_sample, lagrangian_penalty,
                           update_multipliers)
from kdprune.tensor import CounterRNG, Tensor

# Monte Carlo oracle (raw numpy, 1e6 draws, seed 12345), computed before any
# package code was compared against it.
MC_P_NONZERO = {-2.0: 0.400656, 0.0: 0.831199, 2.0: 0.973361}


@pytest.mark.parametrize("log_alpha", sorted(MC_P_NONZERO))
def test_prob_nonzero_matches_frozen_monte_carlo(log_alpha):
    p = float(hard_concrete_prob_nonzero(Tensor(np.array([log_alpha]))).data[0])
    assert abs(p - MC_P_NONZERO[log_alpha]) < 0.01


def test_prob_nonzero_closed_form_at_zero():
    p = float(hard_concrete_prob_nonzero(Tensor(np.array([0.0]))).data[0])
    assert p == pytest.approx(1.0 / (1.0 + (1.1 / 0.1) ** (-2.0 / 3.0)), abs=1e-12)
    assert p == pytest.approx(0.8318, abs=1e-4)


def test_sample_uses_package_rng_and_matches_mc():
    gs = GateSet({"a": 200_000}, init_log_alpha=0.0).train()
    z = gs.sample(CounterRNG(1), 0)["a"].data
    assert abs((z > 0).mean() - MC_P_NONZERO[0.0]) < 0.01
    assert z.min() >= 0.0 and z.max() <= 1.0
    assert (z == 0).any() and (z == 1).any()


def test_eval_gate_values():
    z = hard_concrete_eval(Tensor(np.array([-5.0, 0.0, 2.5]))).data
    np.testing.assert_allclose(z, [0.0, 0.5, 1.0])


def test_sampling_in_eval_mode_is_an_error():
    gs = GateSet({"a": 3}).eval()
    with pytest.raises(RuntimeError):
        gs.sample(CounterRNG(0), 0)


def test_sample_is_deterministic_per_step():
    gs = GateSet({"a": 5, "b": 3}).train()
    r = CounterRNG(9)
    a = gs.sample(r, 4)
    b = gs.sample(r, 4)
    c = gs.sample(r, 5)
    np.testing.assert_array_equal(a["a"].data, b["a"].data)
    assert not np.array_equal(a["a"].data, c["a"].data)


def test_bad_stretch_rejected():
    with pytest.raises(ValueError):
        hard_concrete_sample(Tensor(np.zeros(2)), np.full(2, 0.5), lo=0.1, hi=1.1)


def test_current_sparsity_formula():
    groups = [PruneGroup(0, "attention_head", "x", 0, 10), PruneGroup(1, "attention_head", "x", 1, 30)]
    s = current_sparsity(groups, np.array([1.0, 0.5]))
    assert float(s.data) == pytest.approx(1 - (10 + 15) / 40)
    with pytest.raises(ValueError):
        current_sparsity([], np.array([]))


def test_expected_sparsity_matches_current_sparsity():
    groups = [PruneGroup(i, "ffn_hidden_unit", "o1" if i < 3 else "o2", i % 3, 4 if i < 3 else 9)
              for i in range(6)]
    gs = GateSet.from_groups(groups)
    gs.log_alpha["o1"].data = np.array([-1.0, 0.0, 3.0])
    gs.log_alpha["o2"].data = np.array([2.0, -4.0, 0.5])
    p = np.concatenate([pj.data for pj in gs.prob_nonzero().values()])
    assert float(gs.expected_sparsity().data) == pytest.approx(float(current_sparsity(groups, p).data), abs=1e-14)
    assert float(gs.expected_sparsity().data) == pytest.approx(
        float(current_sparsity(groups, gs.prob_nonzero()).data), abs=1e-14)


def test_gate_state_roundtrip():
    gs = GateSet({"enc.l0.attn": 4})
    gs.log_alpha["enc.l0.attn"].data = np.arange(4.0)
    other = GateSet({"enc.l0.attn": 4})
    other.load_state(gs.state())
    np.testing.assert_array_equal(other.log_alpha["enc.l0.attn"].data, np.arange(4.0))
    assert "gates/enc/l0/attn/log_alpha" in gs.state()


def test_target_schedule_linear_ramp():
    s = TargetSchedule(0.6, 100)
    assert s.at(0) == 0.0
    assert s.at(50) == pytest.approx(0.3)
    assert s.at(100) == s.at(1000) == 0.6


def test_lagrangian_penalty_value_and_ascent():
    st_ = LagrangianState.create(0.5, 0)
    st_.lambda1.data = np.asarray(2.0)
    st_.lambda2.data = np.asarray(3.0)
    pen = lagrangian_penalty(st_, 0.3)
    assert float(pen.data) == pytest.approx(2.0 * -0.2 + 3.0 * 0.04)
    pen.backward()
    update_multipliers(st_, lr=0.1)
    # ascent: d/dlambda1 = s - t = -0.2, d/dlambda2 = (s - t)^2 = 0.04
    assert float(st_.lambda1.data) == pytest.approx(2.0 - 0.02)
    assert float(st_.lambda2.data) == pytest.approx(3.0 + 0.004)
    assert st_.step == 1


def test_lagrangian_non_finite_gradient_raises():
    st_ = LagrangianState.create(0.5, 0)
    with pytest.raises(FloatingPointError):
        update_multipliers(st_, 0.1, grads=(float("nan"), 0.0))


def test_lagrangian_state_roundtrip():
    a = LagrangianState.create(0.83, 10)
    a.lambda1.data = np.asarray(-1.5)
    b = LagrangianState.create(0.1, 10)
    b.load_state(a.state())
    assert float(b.lambda1.data) == -1.5 and b.target == pytest.approx(0.83)


@settings(max_examples=50, deadline=None)
@given(st.floats(-8, 8), st.floats(1e-6, 1 - 1e-6))
def test_sample_in_unit_interval_and_monotone_in_log_alpha(la, u):
    z1 = float(hard_concrete_sample(Tensor(np.array([la])), np.array([u])).data[0])
    z2 = float(hard_concrete_sample(Tensor(np.array([la + 0.5])), np.array([u])).data[0])
    assert 0.0 <= z1 <= 1.0
    assert z2 >= z1 - 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=1, max_size=8))
def test_expected_sparsity_in_unit_interval(las):
    gs = GateSet({"a": len(las)})
    gs.log_alpha["a"].data = np.array(las)
    s = float(gs.expected_sparsity().data)
    assert 0.0 <= s <= 1.0
    assert math.isfinite(s)
