"""Transducer (RNN-T) prediction network, joint network, loss and decoding.

The loss marginalizes over every monotonic alignment of a ``T x (U+1)``
lattice.  ``alpha[t, u]`` is the log-probability of having emitted the first
``u`` labels after reaching frame ``t``::

    alpha[t, u] = logaddexp(alpha[t-1, u] + blank[t-1, u],
                            alpha[t, u-1] + label[t, u-1])
    log P(y | x) = alpha[T-1, U] + blank[T-1, U]

The backward table ``beta`` gives the same total and, combined with
``alpha``, the gradient with respect to every log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..nn import Embedding, Linear, Module
from ..tensor import Tensor, _make
from .conformer import CascadedEncoder, ConformerConfig


class ContractError(ValueError):
    pass


class Predictor(Module):
    """Label-prefix encoder: embedding + one minimal gated recurrent layer.

    Input at step 0 is the start symbol (the blank index); the state after
    consuming the start symbol and ``labels[:u]`` is output row ``u``.
    """

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int, rng):
        self.embed = Embedding(vocab_size + 1, emb_dim, rng, scale=0.5)
        self.forget_x = Linear(emb_dim, hidden, rng)
        self.forget_h = Linear(hidden, hidden, rng, bias=False)
        self.cand_x = Linear(emb_dim, hidden, rng)
        self.cand_h = Linear(hidden, hidden, rng, bias=False)
        self._vocab = vocab_size
        self._hidden = hidden

    @property
    def hidden(self) -> int:
        return self._hidden

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        f = tc.sigmoid(self.forget_x(x) + self.forget_h(h))
        cand = tc.tanh(self.cand_x(x) + self.cand_h(f * h))
        return h + f * (cand - h)

    def __call__(self, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[None]
        if labels.size and (labels.min() < 0 or labels.max() >= self._vocab):
            raise ContractError(f"label outside vocabulary [0, {self._vocab})")
        B, U = labels.shape
        inputs = np.concatenate([np.full((B, 1), self._vocab, dtype=np.int64), labels], axis=1)
        emb = self.embed(inputs)
        h = tc.zeros((B, self._hidden))
        states = []
        for u in range(U + 1):
            h = self.step(emb[:, u, :], h)
            states.append(tc.reshape(h, (B, 1, self._hidden)))
        return states[0] if U == 0 else tc.concat(states, axis=1)


class Joint(Module):
    """``logits = out(tanh(enc_proj(enc_t) + pred_proj(pred_u)))``."""

    def __init__(self, enc_dim: int, pred_dim: int, joint_dim: int, vocab_size: int, rng):
        self.enc_proj = Linear(enc_dim, joint_dim, rng)
        self.pred_proj = Linear(pred_dim, joint_dim, rng, bias=False)
        self.out = Linear(joint_dim, vocab_size + 1, rng)

    def __call__(self, enc: Tensor, pred: Tensor) -> Tensor:
        """(B, T, d) x (B, U+1, p) -> (B, T, U+1, V+1) logits."""
        B, T, _ = enc.shape
        U1 = pred.shape[1]
        e = tc.reshape(self.enc_proj(enc), (B, T, 1, -1))
        p = tc.reshape(self.pred_proj(pred), (B, 1, U1, -1))
        return self.out(tc.tanh(e + p))


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------

@dataclass
class TransducerLattice:
    """One utterance's log-probabilities with forward/backward tables."""

    log_probs: np.ndarray  # (T, U+1, V+1), blank at index V
    targets: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def blank(self) -> int:
        return self.log_probs.shape[-1] - 1

    def log_likelihood_alpha(self) -> float:
        T, U1, _ = self.log_probs.shape
        return float(self.alpha[T - 1, U1 - 1] + self.log_probs[T - 1, U1 - 1, self.blank])

    def log_likelihood_beta(self) -> float:
        return float(self.beta[0, 0])


def _emissions(log_probs: np.ndarray, targets: np.ndarray, blank: int):
    """blank[b, t, u] and label[b, t, u] = log_probs[b, t, u, targets[b, u]]."""
    B, T, U1, _ = log_probs.shape
    lp_blank = log_probs[..., blank]
    if U1 > 1:
        idx = np.broadcast_to(targets[:, None, :, None], (B, T, U1 - 1, 1))
        lp_label = np.take_along_axis(log_probs[:, :, :U1 - 1, :], idx, axis=-1)[..., 0]
    else:
        lp_label = np.zeros((B, T, 0), dtype=log_probs.dtype)
    return lp_blank, lp_label


def _forward_backward(lp_blank, lp_label, T_len, U_len):
    B, T, U1 = lp_blank.shape
    ninf = -np.inf
    alpha = np.full((B, T, U1), ninf)
    alpha[:, 0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = alpha[:, t - 1, u] + lp_blank[:, t - 1, u] if t > 0 else np.full(B, ninf)
            b = alpha[:, t, u - 1] + lp_label[:, t, u - 1] if u > 0 else np.full(B, ninf)
            alpha[:, t, u] = np.logaddexp(a, b)
    bidx = np.arange(B)
    beta = np.full((B, T + 1, U1 + 1), ninf)
    # terminal: beta at (T_b - 1, U_b) is the final blank
    tt = np.arange(T)[None, :, None]
    uu = np.arange(U1)[None, None, :]
    valid = (tt < T_len[:, None, None]) & (uu <= U_len[:, None, None])
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            a = beta[:, t + 1, u] + lp_blank[:, t, u]
            b = beta[:, t, u + 1] + (lp_label[:, t, u] if u < U1 - 1 else ninf)
            val = np.logaddexp(a, b)
            term = (t == T_len - 1) & (u == U_len)
            val = np.where(term, lp_blank[:, t, u], val)
            beta[:, t, u] = np.where(valid[:, t, u], val, ninf)
    logp = alpha[bidx, T_len - 1, U_len] + lp_blank[bidx, T_len - 1, U_len]
    return alpha, beta[:, :T, :U1], beta, logp


def rnnt_nll(log_probs: Tensor, targets, input_lengths=None, target_lengths=None) -> Tensor:
    """Per-utterance transducer negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, Umax+1, V+1) normalized over the last axis with
    blank at index V; ``targets`` is (B, Umax) of labels in [0, V).
    """
    lp = log_probs.data
    if lp.ndim == 3:
        return tc.reshape(rnnt_nll(tc.reshape(log_probs, (1,) + lp.shape), np.asarray(targets)[None],
                                   input_lengths, target_lengths), ())
    B, T, U1, V1 = lp.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(B, U1 - 1)
    T_len = np.full(B, T) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    U_len = np.full(B, U1 - 1) if target_lengths is None else np.asarray(target_lengths, dtype=np.int64)
    if np.any(T_len < 1):
        raise ContractError("transducer loss needs at least one frame per utterance")
    if np.any(U_len > U1 - 1) or np.any(T_len > T):
        raise ContractError("lengths exceed the padded lattice")
    blank = V1 - 1
    tmask = np.arange(U1 - 1)[None, :] < U_len[:, None]
    if np.any((targets < 0) & tmask) or np.any((targets >= blank) & tmask):
        raise ContractError(f"labels must lie in [0, {blank})")
    safe_targets = np.where(tmask, targets, 0)
    lp_blank, lp_label = _emissions(lp, safe_targets, blank)
    alpha, beta, beta_pad, logp = _forward_backward(lp_blank, lp_label, T_len, U_len)

    def bw(g):
        # d(-logP)/d lp = -exp(alpha + beta_next + lp - logP) along each lattice edge
        gb = np.zeros((B, T, U1))
        with np.errstate(invalid="ignore"):
            nb = alpha + beta_pad[:, 1:T + 1, :U1] + lp_blank - logp[:, None, None]
        term_t = T_len - 1
        bidx = np.arange(B)
        nb[bidx, term_t, U_len] = alpha[bidx, term_t, U_len] + lp_blank[bidx, term_t, U_len] - logp
        gb = -np.exp(np.nan_to_num(nb, nan=-np.inf))
        grad = np.zeros_like(lp)
        grad[..., blank] = gb
        if U1 > 1:
            with np.errstate(invalid="ignore"):
                nl = alpha[:, :, :U1 - 1] + beta_pad[:, :T, 1:U1] + lp_label - logp[:, None, None]
            gl = -np.exp(np.nan_to_num(nl, nan=-np.inf))
            idx = np.broadcast_to(safe_targets[:, None, :, None], (B, T, U1 - 1, 1))
            sub = grad[:, :, :U1 - 1, :]
            np.put_along_axis(sub, idx, np.take_along_axis(sub, idx, axis=-1) + gl[..., None], axis=-1)
            grad[:, :, :U1 - 1, :] = sub
        return (grad * g[:, None, None, None],)

    return _make(-logp, (log_probs,), bw, "rnnt_nll")


def build_lattice(log_probs: np.ndarray, targets) -> TransducerLattice:
    """Forward/backward tables for one utterance (``log_probs`` is (T, U+1, V+1))."""
    lp = np.asarray(log_probs, dtype=np.float64)[None]
    T, U1 = lp.shape[1], lp.shape[2]
    tg = np.asarray(targets, dtype=np.int64).reshape(1, U1 - 1)
    lb, ll = _emissions(lp, tg, lp.shape[-1] - 1)
    alpha, beta, _, _ = _forward_backward(lb, ll, np.array([T]), np.array([U1 - 1]))
    return TransducerLattice(lp[0], tg[0], alpha[0], beta[0])


def transducer_loss(encoder_out: Tensor, predictor_out: Tensor, joint: Joint, targets,
                    input_lengths=None, target_lengths=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` given encoder and predictor states."""
    if encoder_out.ndim == 2:
        encoder_out = tc.reshape(encoder_out, (1,) + encoder_out.shape)
    if predictor_out.ndim == 2:
        predictor_out = tc.reshape(predictor_out, (1,) + predictor_out.shape)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    if encoder_out.shape[1] == 0:
        raise ContractError("transducer loss needs T >= 1")
    lp = tc.log_softmax(joint(encoder_out, predictor_out), axis=-1)
    nll = rnnt_nll(lp, targets, input_lengths, target_lengths)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return tc.sum_(nll)
    return tc.mean(nll)


# ---------------------------------------------------------------------------
# full model, decoding, scoring
# ---------------------------------------------------------------------------

class TransducerModel(Module):
    """Cascaded encoder + shared predictor and joint for both encoder taps."""

    def __init__(self, cfg: ConformerConfig, pred_dim: int = 32, joint_dim: int = 32, seed: int = 0,
                 encoder: CascadedEncoder | None = None):
        rng = np.random.default_rng(seed + 1)
        self.encoder = encoder if encoder is not None else CascadedEncoder(cfg, seed)
        self.predictor = Predictor(cfg.vocab_size, pred_dim, pred_dim, rng)
        self.joint = Joint(cfg.model_dim, pred_dim, joint_dim, cfg.vocab_size, rng)
        self.cfg = cfg
        self.assign_paths()

    def loss(self, feats, lengths, targets, target_lengths, gates=None, enc_out=None):
        """Mean over the two taps of the batch-mean transducer NLL."""
        out = enc_out if enc_out is not None else self.encoder(feats, lengths, gates)
        pred = self.predictor(targets)
        streaming = transducer_loss(out.causal, pred, self.joint, targets, lengths, target_lengths)
        nonstreaming = transducer_loss(out.noncausal, pred, self.joint, targets, lengths, target_lengths)
        return (streaming + nonstreaming) * 0.5, out, {"rnnt_streaming": streaming, "rnnt_nonstreaming": nonstreaming}


def greedy_decode(model: TransducerModel, encoder_out, max_symbols: int = 10) -> list[int]:
    """Time-synchronous greedy decoding of one utterance (``encoder_out`` is (T, d))."""
    enc = encoder_out.data if isinstance(encoder_out, Tensor) else np.asarray(encoder_out)
    blank = model.cfg.vocab_size
    pred = model.predictor
    joint = model.joint
    hyp: list[int] = []
    with tc.no_grad():
        enc_proj = joint.enc_proj(Tensor(enc)).data
        h = pred.step(pred.embed(np.array([blank])), tc.zeros((1, pred.hidden)))
        for t in range(enc.shape[0]):
            for _ in range(max_symbols):
                hj = np.tanh(enc_proj[t] + joint.pred_proj(h).data[0])
                logits = hj @ joint.out.weight.data + joint.out.bias.data
                k = int(np.argmax(logits))
                if k == blank:
                    break
                hyp.append(k)
                h = pred.step(pred.embed(np.array([k])), h)
    return hyp


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hyp, ref) -> float:
    """Edit distance over ``max(1, len(ref))``; splits strings on whitespace."""
    if isinstance(hyp, str):
        hyp = hyp.split()
    if isinstance(ref, str):
        ref = ref.split()
    return edit_distance(hyp, ref) / max(1, len(ref))
