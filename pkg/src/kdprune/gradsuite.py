"""The gradient-check suite: every differentiable operation against central differences.

Inputs are seeded and kept away from kinks (``abs``, ``relu``, ``clamp``
boundaries) so that finite differences are meaningful.  All checks run in
float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tc
from .distill import DistillSpec, distill_loss, kd_encoder_loss
from .gates import GateSet, LagrangianState, hard_concrete_eval, hard_concrete_prob_nonzero, \
    hard_concrete_sample, lagrangian_penalty
from .gradcheck import GradCheckReport, grad_check
from .lowrank import factorize, lrf_forward
from .models.conformer import CascadedEncoder, ConformerConfig
from .models.transducer import Predictor, TransducerModel, rnnt_nll, transducer_loss
from .tensor import Tensor

TOL = 1e-4


def _t(rng, *shape, scale=1.0, away_from_zero=False):
    x = rng.normal(0.0, scale, size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)
    return Tensor(x, requires_grad=True)


def _w(rng, *shape):
    """Fixed random weights that turn any tensor into a scalar loss."""
    return rng.normal(size=shape)


def _scalar(fn: Callable[..., Tensor], weights):
    return lambda *xs: tc.sum_(fn(*xs) * weights)


def tensor_op_checks(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = []

    def check(name, fn, *inputs, shape=None):
        w = _w(rng, *(shape or fn(*inputs).shape))
        out.append(grad_check(_scalar(fn, w), list(inputs), tol=TOL, name=name))

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    check("add (broadcast)", tc.add, _t(rng, 3, 4), _t(rng, 4))
    check("sub", tc.sub, a, b)
    check("mul (broadcast)", tc.mul, _t(rng, 2, 3, 4), _t(rng, 3, 1))
    check("div", tc.div, _t(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True))
    check("neg", tc.neg, _t(rng, 5))
    check("sigmoid", tc.sigmoid, _t(rng, 3, 4, scale=2.0))
    check("log", tc.log, Tensor(rng.uniform(0.3, 3.0, (3, 4)), requires_grad=True))
    check("exp", tc.exp, _t(rng, 3, 4))
    check("tanh", tc.tanh, _t(rng, 3, 4))
    check("swish", tc.swish, _t(rng, 3, 4, scale=2.0))
    check("relu", tc.relu, _t(rng, 3, 4, away_from_zero=True))
    check("abs", tc.abs_, _t(rng, 3, 4, away_from_zero=True))
    x = Tensor(rng.uniform(-2.0, 2.0, (40,)), requires_grad=True)
    x.data = np.where(np.abs(np.abs(x.data) - 1.0) < 0.05, x.data * 0.8, x.data)
    check("clamp", lambda v: tc.clamp(v, -1.0, 1.0), x)
    check("matmul", tc.matmul, _t(rng, 2, 3, 4), _t(rng, 4, 5))
    check("matmul (batched)", tc.matmul, _t(rng, 2, 3, 4), _t(rng, 2, 4, 2))
    check("linear", tc.linear, _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5))
    check("sum axis", lambda v: tc.sum_(v, axis=1), _t(rng, 3, 4, 2))
    check("mean keepdims", lambda v: tc.mean(v, axis=(0, 2), keepdims=True), _t(rng, 3, 4, 2))
    check("softmax", lambda v: tc.softmax(v, axis=-1), _t(rng, 3, 5))
    check("log_softmax", lambda v: tc.log_softmax(v, axis=-1), _t(rng, 3, 5))
    check("layernorm", tc.layernorm, _t(rng, 3, 6))
    out.append(grad_check(lambda p, q: tc.l1_mean(p, q), [_t(rng, 4, 3), _t(rng, 4, 3)], tol=TOL,
                          name="l1_mean"))
    mask = (rng.random((4, 1)) > 0.3).astype(float)
    mask[0] = 1.0
    out.append(grad_check(lambda p, q: tc.l1_mean(p, q, mask), [_t(rng, 4, 3), _t(rng, 4, 3)], tol=TOL,
                          name="l1_mean (weighted)"))
    check("cosine", lambda p, q: tc.cosine(p, q, axis=-1), _t(rng, 4, 5), _t(rng, 4, 5))
    check("reshape", lambda v: tc.reshape(v, (6, 2)), _t(rng, 3, 4))
    check("transpose", lambda v: tc.transpose(v, (2, 0, 1)), _t(rng, 2, 3, 4))
    check("getitem slice", lambda v: v[:, 1:3], _t(rng, 3, 4))
    idx = (np.array([0, 2, 2]), np.array([1, 0, 1]))
    check("getitem fancy", lambda v: tc.getitem(v, idx), _t(rng, 3, 2))
    check("concat", lambda p, q: tc.concat([p, q], axis=1), _t(rng, 2, 3), _t(rng, 2, 2))
    check("conv1d depthwise causal", lambda v, k, c: tc.conv1d_depthwise(v, k, c, causal=True),
          _t(rng, 2, 6, 3), _t(rng, 3, 3), _t(rng, 3))
    check("conv1d depthwise same", lambda v, k: tc.conv1d_depthwise(v, k, causal=False),
          _t(rng, 2, 6, 3), _t(rng, 3, 5))
    check("embedding", lambda tab: tc.embedding(tab, np.array([[0, 2], [2, 1]])), _t(rng, 3, 4))
    return out


def hard_concrete_checks(seed: int = 1) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    la = Tensor(np.array([-2.0, -0.5, 0.0, 0.7, 2.0]), requires_grad=True)
    # frozen noise chosen so that no stretched sample sits near a clamp edge
    u = np.array([0.9, 0.6, 0.4, 0.3, 0.05])
    w = _w(rng, 5)
    reports = [
        grad_check(_scalar(lambda a: hard_concrete_sample(a, u), w), la, tol=TOL, name="hard concrete sample"),
        grad_check(_scalar(lambda a: hard_concrete_prob_nonzero(a), w), la, tol=TOL,
                   name="hard concrete P(z>0)"),
        grad_check(_scalar(lambda a: hard_concrete_eval(a), w[:3]), Tensor(np.array([-1.0, 0.0, 0.5]),
                   requires_grad=True), tol=TOL, name="hard concrete eval gate"),
    ]
    gs = GateSet({"a": 3, "b": 2}, counts={"a": np.array([4.0, 4.0, 4.0]), "b": np.array([7.0, 7.0])})
    gs.log_alpha["a"].data = rng.normal(size=3)
    gs.log_alpha["b"].data = rng.normal(size=2)
    reports.append(grad_check(lambda a, b: gs.expected_sparsity(), gs.parameters(), tol=TOL,
                              name="expected sparsity"))
    return reports


def lagrangian_checks(seed: int = 2) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    state = LagrangianState.create(0.5, 0)
    state.lambda1.data = np.asarray(rng.normal())
    state.lambda2.data = np.asarray(abs(rng.normal()))
    s = Tensor(np.asarray(0.3), requires_grad=True)
    return [
        grad_check(lambda v: lagrangian_penalty(state, v), s, tol=TOL, name="lagrangian penalty d/ds"),
        grad_check(lambda l1, l2: lagrangian_penalty(state, 0.3), [state.lambda1, state.lambda2], tol=TOL,
                   name="lagrangian penalty d/dlambda"),
    ]


def lowrank_checks(seed: int = 3) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    layer = factorize(rng.normal(size=(6, 5)), 3, rng.normal(size=5))
    x = _t(rng, 2, 4, 6)
    z = Tensor(rng.uniform(0.2, 1.0, 3), requires_grad=True)
    w = _w(rng, 2, 4, 5)
    return [grad_check(_scalar(lambda v, zz, A, B, c: lrf_forward(layer, v, zz), w),
                       [x, z, layer.A, layer.B, layer.bias], tol=TOL, name="lrf forward")]


def distill_checks(seed: int = 4) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    teacher = [rng.normal(size=(2, 5, 4)) for _ in range(3)]
    students = [_t(rng, 2, 5, 4) for _ in range(3)]
    mask = np.ones((2, 5))
    mask[1, 3:] = 0.0
    spec = DistillSpec([(1, 1), (3, 3)])
    reports = [grad_check(lambda *s: distill_loss(spec, teacher, list(s), mask), students, tol=TOL,
                          name="layer-wise distill loss")]
    t2 = (teacher[0], teacher[1])
    reports.append(grad_check(lambda a, b: kd_encoder_loss(t2, (a, b), spec, mask), students[:2], tol=TOL,
                              name="encoder-output kd loss"))
    return reports


def transducer_checks(seed: int = 5) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    logits = _t(rng, 2, 3, 3, 4)
    targets = np.array([[1, 2], [0, 0]])
    lengths, tlen = np.array([3, 2]), np.array([2, 1])
    reports = [grad_check(lambda v: tc.sum_(rnnt_nll(tc.log_softmax(v, -1), targets, lengths, tlen)), logits,
                          tol=TOL, name="transducer nll (lattice)")]
    pred = Predictor(3, 4, 4, np.random.default_rng(seed))
    reports.append(grad_check(lambda *ps: tc.sum_(pred(np.array([[0, 2, 1]])) * _w(np.random.default_rng(9), 1, 4, 4)),
                              pred.parameters(), tol=TOL, name="predictor recurrent state"))
    cfg = ConformerConfig(causal_layers=1, noncausal_layers=1, model_dim=8, heads=2, ffn_mult=2, conv_kernel=3,
                          vocab_size=3, input_dim=4, max_len=8)
    model = TransducerModel(cfg, pred_dim=6, joint_dim=6, seed=seed)
    enc = _t(rng, 2, 4, 8)
    pr = model.predictor(targets)
    pr_data = pr.data
    reports.append(grad_check(lambda e: transducer_loss(e, Tensor(pr_data), model.joint, targets,
                                                        np.array([4, 3]), tlen),
                              enc, tol=TOL, name="transducer loss via joint"))
    return reports


def encoder_checks(seed: int = 6) -> list[GradCheckReport]:
    """Whole conformer stack (both blocks) with gates, on a subset of entries."""
    rng = np.random.default_rng(seed)
    cfg = ConformerConfig(causal_layers=1, noncausal_layers=1, model_dim=8, heads=2, ffn_mult=2, conv_kernel=3,
                          vocab_size=3, input_dim=4, max_len=8)
    enc = CascadedEncoder(cfg, seed)
    x = rng.normal(size=(2, 5, 4))
    lengths = np.array([5, 3])
    gates = {enc.causal[0].attn.path: Tensor(np.array([0.7, 1.0])),
             enc.noncausal[0].ffn1.path: Tensor(rng.uniform(0.2, 1.0, 16))}
    w = _w(rng, 2, 5, 8)
    params = enc.parameters()

    def f(*ps):
        out = enc(x, lengths, gates)
        return tc.sum_(out.noncausal * w) + tc.sum_(out.causal * w)

    return [grad_check(f, params, tol=TOL, name="cascaded encoder parameters", max_entries=12, seed=seed)]


def run_suite() -> list[GradCheckReport]:
    prev = tc.get_default_dtype()
    tc.set_default_dtype(np.float64)
    try:
        reports = []
        for fn in (tensor_op_checks, hard_concrete_checks, lagrangian_checks, lowrank_checks,
                   distill_checks, transducer_checks, encoder_checks):
            reports.extend(fn())
        return reports
    finally:
        tc.set_default_dtype(prev)
