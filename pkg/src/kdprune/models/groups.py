"""Prune-group declaration, parameter census and LRF conversion for encoders."""

from __future__ import annotations

import csv
import io

from ..gates import PruneGroup
from ..lowrank import FactorizedLinear, factorize, init_rank
from ..nn import Linear, Module
from .conformer import CascadedEncoder

DENSE_SLOTS = (("ffn1", "fc_in"), ("ffn1", "fc_out"), ("attn", "q"), ("attn", "k"), ("attn", "v"),
               ("attn", "o"), ("conv", "pw_in"), ("conv", "pw_out"), ("ffn2", "fc_in"), ("ffn2", "fc_out"))

BLOCKS = ("causal", "noncausal", "frontend", "predictor", "joint", "head")


def _encoder_of(model: Module) -> CascadedEncoder:
    return model if isinstance(model, CascadedEncoder) else model.encoder


def encoder_method(model: Module) -> str:
    enc = _encoder_of(model)
    return "lrf" if isinstance(enc.layers[0].ffn1.fc_in, FactorizedLinear) else "l0"


def build_prune_groups(model: Module, method: str | None = None) -> list[PruneGroup]:
    """One group per head / FFN hidden unit / conv channel (l0) or per rank (lrf)."""
    enc = _encoder_of(model)
    method = method or encoder_method(enc)
    groups: list[PruneGroup] = []

    def add(kind, owner, n, count):
        for i in range(n):
            groups.append(PruneGroup(len(groups), kind, owner, i, count))

    for layer in enc.layers:
        if method == "l0":
            ffn1, att, conv, ffn2 = layer.ffn1, layer.attn, layer.conv, layer.ffn2
            add("ffn_hidden_unit", ffn1.path, ffn1.hidden, ffn1.fc_in.n_in + ffn1.fc_out.n_out)
            add("attention_head", att.path, att.heads,
                att.head_dim * (att.q.n_in + att.k.n_in + att.v.n_in + att.o.n_out))
            add("conv_pointwise_channel", conv.path, conv.channels, 2 * conv.pw_in.n_in + conv.pw_out.n_out)
            add("ffn_hidden_unit", ffn2.path, ffn2.hidden, ffn2.fc_in.n_in + ffn2.fc_out.n_out)
        elif method == "lrf":
            for dense in layer.dense_layers():
                if not isinstance(dense, FactorizedLinear):
                    raise TypeError(f"{dense.path} is not factorized; convert with factorize_encoder first")
                add("lrf_rank", dense.path, dense.r, dense.m + dense.n)
        else:
            raise ValueError(f"unknown pruning method {method!r}")
    return groups


def prunable_layers(model: Module) -> list[Module]:
    return [d for layer in _encoder_of(model).layers for d in layer.dense_layers()]


def prunable_census(model: Module) -> int:
    """Dense weights (biases excluded) of every prunable layer."""
    return sum(d.dense_weight_count() for d in prunable_layers(model))


def block_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "encoder":
        if parts[1] in ("causal", "noncausal"):
            return parts[1]
        return "frontend"
    return parts[0]


def block_census(model: Module) -> dict[str, int]:
    """Exact parameter counts per block, enumerated over parameter tensors."""
    out = {b: 0 for b in BLOCKS}
    prefix = "encoder" if isinstance(model, CascadedEncoder) else ""
    for name, p in model.named_parameters(prefix):
        out[block_of(name)] = out.get(block_of(name), 0) + p.size
    return out


def groups_csv(groups) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group_id", "kind", "owner", "param_count"])
    for g in groups:
        w.writerow([g.id, g.kind, g.owner, g.param_count])
    return buf.getvalue()


def factorize_encoder(model: Module) -> Module:
    """Copy of ``model`` with every prunable dense layer replaced by its
    truncated-SVD factorization at rank ``mn / (m + n)``."""
    out = model.clone()
    enc = _encoder_of(out)
    for layer in enc.layers:
        for sub, attr in DENSE_SLOTS:
            holder = getattr(layer, sub)
            dense = getattr(holder, attr)
            if not isinstance(dense, Linear):
                raise TypeError(f"{dense.path} is already factorized")
            r = init_rank(dense.n_in, dense.n_out)
            setattr(holder, attr, factorize(dense.weight.data, r, None if dense.bias is None else dense.bias.data))
    top_prefix = "encoder" if out is enc else ""
    out.assign_paths(top_prefix)
    return out
