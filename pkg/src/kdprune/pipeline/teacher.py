"""Teacher preparation: masked-frame code prediction, then optional RNN-T fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..config import RunConfig
from ..data import Batch, BatchSampler
from ..models.transducer import ContractError, TransducerModel
from ..optim import AdamW, ParamGroup
from .io import PretextModel
from .loop import MetricsLog, check_finite


class RandomProjectionQuantizer:
    """Frozen random projection followed by nearest-codeword lookup.

    Projected frames and codewords are both l2-normalized, so the code of a
    frame is the codeword with the largest cosine similarity.
    """

    def __init__(self, input_dim: int, code_dim: int, n_codes: int, seed: int):
        for attempt in range(100):
            rng = np.random.default_rng([seed, 0x5152, attempt])
            proj = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, code_dim))
            book = rng.normal(size=(n_codes, code_dim))
            book /= np.linalg.norm(book, axis=1, keepdims=True)
            # duplicate codewords would make targets ambiguous
            if len(np.unique(np.round(book, 12), axis=0)) == n_codes:
                break
        self.projection = proj
        self.codebook = book
        self.attempts = attempt + 1

    @property
    def n_codes(self) -> int:
        return self.codebook.shape[0]

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        z = np.asarray(frames) @ self.projection
        z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
        return np.argmax(z @ self.codebook.T, axis=-1)


def span_mask(lengths: np.ndarray, T: int, prob: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (B, T) mask: each valid frame starts a masked span with probability ``prob``."""
    if prob <= 0.0:
        raise ContractError("masked prediction needs a positive masking rate")
    B = len(lengths)
    starts = rng.random((B, T)) < prob
    mask = np.zeros((B, T), dtype=bool)
    for k in range(span):
        mask[:, k:] |= starts[:, :T - k]
    mask &= np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    if not mask.any():
        # force one span so the loss is defined
        b = int(rng.integers(B))
        t0 = int(rng.integers(max(int(lengths[b]) - span + 1, 1)))
        mask[b, t0:t0 + span] = True
        mask[b, int(lengths[b]):] = False
    return mask


def masked_code_loss(model: PretextModel, batch: Batch, quantizer: RandomProjectionQuantizer,
                     mask: np.ndarray, noise: np.ndarray, gates=None):
    """Cross-entropy on masked frames, averaged over the causal and non-causal taps."""
    if not mask.any():
        raise ContractError("masked prediction loss needs at least one masked frame")
    codes = quantizer(batch.feats)
    x = np.where(mask[..., None], noise, batch.feats)
    out = model.encoder(x, batch.lengths, gates)
    b_idx, t_idx = np.nonzero(mask)
    target = codes[b_idx, t_idx]
    losses = []
    for h in (out.causal, out.noncausal):
        logp = tc.log_softmax(model.head(h), axis=-1)
        picked = tc.getitem(logp, (b_idx, t_idx, target))
        losses.append(-tc.mean(picked))
    return (losses[0] + losses[1]) * 0.5, out


@dataclass
class PretextBatchMaker:
    """Deterministic masking noise for pretext steps, keyed by ``(seed, step)``."""

    cfg: RunConfig

    def __call__(self, batch: Batch, step: int):
        p = self.cfg.pretrain
        rng = np.random.default_rng([self.cfg.seed, 0x9E7, step])
        B, T, d = batch.feats.shape
        mask = span_mask(batch.lengths, T, p.mask_prob, p.mask_span, rng)
        noise = rng.normal(0.0, p.mask_noise, size=(B, T, d))
        return mask, noise


def default_optimizer(cfg: RunConfig, params, extra: list[ParamGroup] = ()) -> AdamW:
    o = cfg.optim
    groups = [ParamGroup(list(params), o.lr, o.weight_decay)] + list(extra)
    return AdamW(groups, o.warmup_steps, (o.beta1, o.beta2), o.eps)


def pretrain_teacher(cfg: RunConfig, train, log: MetricsLog | None = None,
                     steps: int | None = None) -> tuple[PretextModel, RandomProjectionQuantizer, list[float]]:
    """Train encoder + head to predict quantizer codes of masked input frames."""
    p = cfg.pretrain
    steps = p.steps if steps is None else steps
    quant = RandomProjectionQuantizer(cfg.model.input_dim, p.code_dim, p.n_codes, cfg.seed)
    model = PretextModel(cfg.model, p.n_codes, cfg.seed)
    opt = default_optimizer(cfg, model.parameters())
    masker = PretextBatchMaker(cfg)
    stream = BatchSampler(train, cfg.data.batch_size, cfg.seed).stream()
    curve = []
    for step in range(1, steps + 1):
        batch = next(stream)
        mask, noise = masker(batch, step)
        loss, _ = masked_code_loss(model, batch, quant, mask, noise)
        check_finite(loss, step, "pretrain")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.data))
        if log is not None:
            log.maybe(step, stage="pretrain", loss=curve[-1], lr=opt.lr(opt.groups[0]))
    return model, quant, curve


def finetune_teacher(cfg: RunConfig, pretext: PretextModel, train, log: MetricsLog | None = None,
                     steps: int | None = None) -> tuple[TransducerModel, list[float]]:
    """RNN-T fine-tuning of a pretext-trained encoder (the PTFT teacher)."""
    steps = cfg.finetune.steps if steps is None else steps
    m = cfg.model
    model = TransducerModel(m, m.pred_dim, m.joint_dim, cfg.seed, encoder=pretext.encoder.clone())
    opt = default_optimizer(cfg, model.parameters())
    stream = BatchSampler(train, cfg.data.batch_size, cfg.seed + 1).stream()
    curve = []
    for step in range(1, steps + 1):
        b = next(stream)
        loss, _, parts = model.loss(b.feats, b.lengths, b.targets, b.target_lengths)
        check_finite(loss, step, "finetune")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.data))
        if log is not None:
            log.maybe(step, stage="finetune", loss=curve[-1], lr=opt.lr(opt.groups[0]),
                      **{k: float(v.data) for k, v in parts.items()})
    return model, curve
