"""Desk-scale cascaded conformer encoder (causal block feeding a non-causal block).

Every conformer layer is a macaron stack: half-step feed-forward, multi-head
self-attention, convolution module, half-step feed-forward, final norm.  All
dense layers take an optional ``gates`` mapping: a layer path maps to a gate
vector.  Feed-forward, attention and convolution modules look up their own
path (one gate per hidden unit / head / channel); factorized dense layers look
up theirs (one gate per rank).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as tc
from ..nn import Embedding, LayerNorm, Linear, Module
from ..tensor import Tensor

NEG_INF = -1e30


@dataclass
class ConformerConfig:
    causal_layers: int = 4
    noncausal_layers: int = 2
    model_dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    conv_kernel: int = 7
    vocab_size: int = 16
    input_dim: int = 16
    max_len: int = 64

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.causal_layers < 1 or self.noncausal_layers < 1:
            raise ValueError("both encoder blocks need at least one layer")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def total_layers(self) -> int:
        return self.causal_layers + self.noncausal_layers


def _gate(gates, path):
    return None if gates is None else gates.get(path)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng):
        self.norm = LayerNorm(d)
        self.fc_in = Linear(d, hidden, rng)
        self.fc_out = Linear(hidden, d, rng)

    @property
    def hidden(self) -> int:
        return self.fc_in.n_out

    def __call__(self, x: Tensor, gates=None) -> Tensor:
        h = tc.swish(self.fc_in(self.norm(x), gates))
        z = _gate(gates, self._path)
        if z is not None:
            h = h * z
        return self.fc_out(h, gates)


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.norm = LayerNorm(d)
        self.q = Linear(d, d, rng)
        # a key bias only shifts every score of a query equally, so softmax ignores it
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self._heads = heads
        self._head_dim = d // heads

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def head_dim(self) -> int:
        return self._head_dim

    def __call__(self, x: Tensor, attn_bias: np.ndarray, gates=None) -> Tensor:
        B, T, _ = x.shape
        H, dh = self._heads, self._head_dim
        h = self.norm(x)

        def split(t: Tensor) -> Tensor:
            return tc.transpose(tc.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = split(self.q(h, gates))
        k = split(self.k(h, gates))
        v = split(self.v(h, gates))
        scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + attn_bias
        ctx = tc.matmul(tc.softmax(scores, axis=-1), v)
        z = _gate(gates, self._path)
        if z is not None:
            ctx = ctx * tc.reshape(z, (1, H, 1, 1))
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (B, T, H * dh))
        return self.o(ctx, gates)


class ConvModule(Module):
    """pointwise (d -> 2C) -> GLU -> depthwise conv -> swish -> gate -> pointwise (C -> d)."""

    def __init__(self, d: int, kernel: int, causal: bool, rng, channels: int | None = None):
        C = channels or d
        self.norm = LayerNorm(d)
        self.pw_in = Linear(d, 2 * C, rng)
        self.dw_weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(kernel), size=(C, kernel)), requires_grad=True)
        self.dw_bias = Tensor(np.zeros(C), requires_grad=True)
        self.pw_out = Linear(C, d, rng)
        self._causal = causal

    @property
    def channels(self) -> int:
        return self.dw_weight.shape[0]

    @property
    def causal(self) -> bool:
        return self._causal

    def __call__(self, x: Tensor, frame_mask: np.ndarray, gates=None) -> Tensor:
        C = self.channels
        h = self.pw_in(self.norm(x), gates)
        g = h[..., :C] * tc.sigmoid(h[..., C:])
        # padded frames must look like the implicit zero padding of the conv
        g = g * frame_mask[..., None]
        g = tc.swish(tc.conv1d_depthwise(g, self.dw_weight, self.dw_bias, causal=self._causal))
        z = _gate(gates, self._path)
        if z is not None:
            g = g * z
        return self.pw_out(g, gates)


class ConformerLayer(Module):
    def __init__(self, cfg: ConformerConfig, causal: bool, rng):
        d = cfg.model_dim
        self.ffn1 = FeedForward(d, cfg.ffn_mult * d, rng)
        self.attn = SelfAttention(d, cfg.heads, rng)
        self.conv = ConvModule(d, cfg.conv_kernel, causal, rng)
        self.ffn2 = FeedForward(d, cfg.ffn_mult * d, rng)
        self.norm_out = LayerNorm(d)
        self._causal = causal

    @property
    def causal(self) -> bool:
        return self._causal

    def __call__(self, x: Tensor, attn_bias: np.ndarray, frame_mask: np.ndarray, gates=None) -> Tensor:
        x = x + self.ffn1(x, gates) * 0.5
        x = x + self.attn(x, attn_bias, gates)
        x = x + self.conv(x, frame_mask, gates)
        x = x + self.ffn2(x, gates) * 0.5
        return self.norm_out(x)

    def dense_layers(self) -> list[Module]:
        return [self.ffn1.fc_in, self.ffn1.fc_out, self.attn.q, self.attn.k, self.attn.v, self.attn.o,
                self.conv.pw_in, self.conv.pw_out, self.ffn2.fc_in, self.ffn2.fc_out]


@dataclass
class EncoderOutput:
    causal: Tensor
    noncausal: Tensor
    layers: list[Tensor] = field(default_factory=list)
    frame_mask: np.ndarray | None = None

    def tap(self, mode: str) -> Tensor:
        if mode == "streaming":
            return self.causal
        if mode == "nonstreaming":
            return self.noncausal
        raise ValueError(f"unknown decoding mode {mode!r}")


def frame_mask_from_lengths(lengths, T: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(tc.get_default_dtype())


def attention_bias(frame_mask: np.ndarray, causal: bool) -> np.ndarray:
    """Additive attention bias (B, 1, T, T): padded keys and, if causal, future keys."""
    B, T = frame_mask.shape
    allowed = np.broadcast_to(frame_mask[:, None, None, :] > 0, (B, 1, T, T))
    if causal:
        allowed = allowed & np.tril(np.ones((T, T), dtype=bool))[None, None]
    return np.where(allowed, 0.0, NEG_INF).astype(tc.get_default_dtype())


class CascadedEncoder(Module):
    def __init__(self, cfg: ConformerConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.frontend = Linear(cfg.input_dim, cfg.model_dim, rng)
        self.pos = Embedding(cfg.max_len, cfg.model_dim, rng, scale=0.1)
        self.causal = [ConformerLayer(cfg, True, rng) for _ in range(cfg.causal_layers)]
        self.noncausal = [ConformerLayer(cfg, False, rng) for _ in range(cfg.noncausal_layers)]
        self.assign_paths("encoder")

    @property
    def layers(self) -> list[ConformerLayer]:
        return self.causal + self.noncausal

    def __call__(self, x, lengths=None, gates=None) -> EncoderOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = tc.reshape(x, (1,) + x.shape)
        B, T, _ = x.shape
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        mask = frame_mask_from_lengths(lengths, T)
        h = self.frontend(x) + self.pos(np.arange(T))
        outs = []
        bias_c = attention_bias(mask, causal=True)
        for layer in self.causal:
            h = layer(h, bias_c, mask, gates)
            _check_finite(h, layer)
            outs.append(h)
        causal_out = h
        bias_nc = attention_bias(mask, causal=False)
        for layer in self.noncausal:
            h = layer(h, bias_nc, mask, gates)
            _check_finite(h, layer)
            outs.append(h)
        return EncoderOutput(causal_out, h, outs, mask)


def _check_finite(h: Tensor, layer: Module) -> None:
    if not np.all(np.isfinite(h.data)):
        raise FloatingPointError(f"non-finite activations at layer {layer.path}")


def encoder_forward(encoder: CascadedEncoder, x, mode: str = "nonstreaming", gates=None, lengths=None):
    """Return ``(causal_out, noncausal_out)`` and the tap selected by ``mode``."""
    out = encoder(x, lengths, gates)
    return out.causal, out.noncausal, out.tap(mode)
