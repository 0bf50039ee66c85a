import numpy as np
import pytest

from kdprune.distill import (DistillContractError, DistillSpec, cascaded_layer_selection, distill_loss,
                             kd_encoder_loss, pair_loss, select_layers)
from kdprune.models.conformer import CascadedEncoder
from kdprune.tensor import Tensor


def test_select_layers_rules():
    assert select_layers(24, "stride", 5) == [1, 5, 10, 15, 20, 24]
    assert select_layers(2, "stride", 5) == [1, 2]
    assert select_layers(6, "stride", 5) == [1, 5, 6]
    assert select_layers(4, "first_middle_last") == [1, 2, 4]
    with pytest.raises(ValueError):
        select_layers(1)


def test_cascaded_selection_desk_default():
    assert cascaded_layer_selection(4, 2) == [1, 2, 4, 5, 6]
    assert cascaded_layer_selection(2, 1) == [1, 2, 3]


def test_identical_features_give_zero(rng):
    t = [rng.normal(size=(2, 4, 3)) for _ in range(2)]
    spec = DistillSpec.same_layers([1, 2])
    assert float(distill_loss(spec, t, [Tensor(x) for x in t]).data) == pytest.approx(0.0, abs=1e-12)


def test_negated_unit_frames_give_two():
    # unit-norm frames with mean |value| = 1: one-hot rows of width 1
    t = np.array([[[1.0], [-1.0], [1.0]]])
    loss, parts = pair_loss(t, Tensor(-t))
    assert parts["l1"] == pytest.approx(2.0) and parts["cos"] == pytest.approx(2.0)
    assert float(loss.data) == pytest.approx(2.0)


def test_kd_only_causal_difference_halves(rng):
    t = (rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4)))
    s_causal = Tensor(rng.normal(size=(1, 5, 4)))
    loss = float(kd_encoder_loss(t, (s_causal, Tensor(t[1]))).data)
    assert loss == pytest.approx(0.5 * float(pair_loss(t[0], s_causal)[0].data), abs=1e-12)


def test_kd_equals_hand_average(rng):
    t = (rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)))
    s = (Tensor(rng.normal(size=(2, 5, 4))), Tensor(rng.normal(size=(2, 5, 4))))
    mask = np.ones((2, 5))
    mask[1, 3:] = 0
    expect = 0.5 * (float(pair_loss(t[0], s[0], mask)[0].data) + float(pair_loss(t[1], s[1], mask)[0].data))
    assert float(kd_encoder_loss(t, s, None, mask).data) == pytest.approx(expect, abs=1e-10)


def test_loss_invariant_to_pair_order(rng):
    t = [rng.normal(size=(1, 3, 4)) for _ in range(4)]
    s = [Tensor(rng.normal(size=(1, 3, 4))) for _ in range(4)]
    pairs = [(1, 1), (2, 2), (4, 4)]
    a = float(distill_loss(DistillSpec(pairs), t, s).data)
    b = float(distill_loss(DistillSpec(pairs[::-1]), t, s).data)
    assert a == pytest.approx(b, abs=1e-14)
    assert a >= 0.0


def test_no_gradient_reaches_teacher(tiny_cfg, rng):
    teacher, student = CascadedEncoder(tiny_cfg, 0), CascadedEncoder(tiny_cfg, 1)
    x = rng.normal(size=(1, 4, tiny_cfg.input_dim))
    tout, sout = teacher(x), student(x)
    loss = distill_loss(DistillSpec.same_layers([1, 3]), tout.layers, sout.layers)
    loss.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in teacher.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in student.parameters())


def test_time_mismatch_is_contract_error(rng):
    with pytest.raises(DistillContractError):
        pair_loss(rng.normal(size=(1, 4, 3)), Tensor(rng.normal(size=(1, 5, 3))))


def test_spec_validation():
    with pytest.raises(ValueError):
        DistillSpec([(1, 1)], weight_l1=-0.1)
    with pytest.raises(DistillContractError):
        DistillSpec([(7, 1)]).validate(6, 6)
    with pytest.raises(DistillContractError):
        distill_loss(DistillSpec([]), [], [])
