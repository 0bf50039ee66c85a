"""Turn gate values into physically smaller weight tensors.

Groups whose deterministic gate is exactly 0 are removed; fractional gates
are folded into the weights that consume the gated activations (FFN output
rows, attention output rows, conv output rows, LRF ``A`` columns), so the
compact model computes the same function as the masked one.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..lowrank import FactorizedLinear, prune_ranks
from ..models.conformer import ConformerLayer, ConvModule, FeedForward, SelfAttention
from ..models.groups import DENSE_SLOTS, _encoder_of, encoder_method
from ..nn import Linear, Module
from ..tensor import Tensor


class SurgeryError(RuntimeError):
    pass


def _p(arr) -> Tensor:
    return Tensor(np.ascontiguousarray(arr), requires_grad=True)


def _cols(lin: Linear, idx: np.ndarray) -> None:
    lin.weight = _p(lin.weight.data[:, idx])
    if lin.bias is not None:
        lin.bias = _p(lin.bias.data[idx])


def _rows(lin: Linear, idx: np.ndarray, scale: np.ndarray) -> None:
    lin.weight = _p(lin.weight.data[idx] * scale[:, None])


def shrink_ffn(ffn: FeedForward, keep: np.ndarray, scale: np.ndarray) -> None:
    _cols(ffn.fc_in, keep)
    _rows(ffn.fc_out, keep, scale)


def shrink_attention(attn: SelfAttention, keep: np.ndarray, scale: np.ndarray) -> None:
    dh = attn.head_dim
    cols = (keep[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
    for lin in (attn.q, attn.k, attn.v):
        _cols(lin, cols)
    _rows(attn.o, cols, np.repeat(scale, dh))
    attn._heads = len(keep)


def shrink_conv(conv: ConvModule, keep: np.ndarray, scale: np.ndarray) -> None:
    C = conv.channels
    _cols(conv.pw_in, np.concatenate([keep, C + keep]))
    conv.dw_weight = _p(conv.dw_weight.data[keep])
    conv.dw_bias = _p(conv.dw_bias.data[keep])
    _rows(conv.pw_out, keep, scale)


def _zvec(zhat: Mapping, path: str, n: int) -> np.ndarray:
    if path not in zhat:
        raise SurgeryError(f"no gate values for group owner {path!r}")
    z = zhat[path]
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.shape != (n,):
        raise SurgeryError(f"gate vector for {path!r} has shape {z.shape}, expected ({n},)")
    return z


def _shrink_layer_l0(layer: ConformerLayer, zhat: Mapping) -> None:
    for ffn in (layer.ffn1, layer.ffn2):
        z = _zvec(zhat, ffn.path, ffn.hidden)
        keep = np.flatnonzero(z > 0)
        shrink_ffn(ffn, keep, z[keep])
    z = _zvec(zhat, layer.attn.path, layer.attn.heads)
    keep = np.flatnonzero(z > 0)
    shrink_attention(layer.attn, keep, z[keep])
    z = _zvec(zhat, layer.conv.path, layer.conv.channels)
    keep = np.flatnonzero(z > 0)
    shrink_conv(layer.conv, keep, z[keep])


def _shrink_layer_lrf(layer: ConformerLayer, zhat: Mapping) -> None:
    for sub, attr in DENSE_SLOTS:
        holder = getattr(layer, sub)
        dense = getattr(holder, attr)
        if not isinstance(dense, FactorizedLinear):
            raise SurgeryError(f"{dense.path} is not factorized")
        setattr(holder, attr, prune_ranks(dense, _zvec(zhat, dense.path, dense.r)))


def surgeon(model: Module, zhat: Mapping) -> Module:
    """Compact copy of ``model`` for deterministic gate values ``zhat``."""
    out = model.clone()
    enc = _encoder_of(out)
    method = encoder_method(enc)
    for layer in enc.layers:
        if method == "l0":
            _shrink_layer_l0(layer, zhat)
        else:
            _shrink_layer_lrf(layer, zhat)
    out.assign_paths("encoder" if out is enc else "")
    return out


def topology(model: Module) -> dict:
    """Layer shapes needed to rebuild a (possibly compacted) encoder."""
    enc = _encoder_of(model)
    method = encoder_method(enc)
    layers = {}
    for layer in enc.layers:
        entry = {"ffn1": layer.ffn1.hidden, "heads": layer.attn.heads, "conv": layer.conv.channels,
                 "ffn2": layer.ffn2.hidden}
        if method == "lrf":
            entry["ranks"] = {attr_path(sub, attr): getattr(getattr(layer, sub), attr).r for sub, attr in DENSE_SLOTS}
        layers[layer.path] = entry
    return {"method": method, "layers": layers}


def attr_path(sub: str, attr: str) -> str:
    return f"{sub}.{attr}"


def apply_topology(model: Module, topo: dict) -> Module:
    """Shrink a freshly built model in place to the shapes recorded in ``topo``."""
    from ..models.groups import factorize_encoder

    if topo["method"] == "lrf" and encoder_method(model) != "lrf":
        model = factorize_encoder(model)
    enc = _encoder_of(model)
    for layer in enc.layers:
        entry = topo["layers"].get(layer.path)
        if entry is None:
            raise SurgeryError(f"topology has no entry for layer {layer.path}")
        if topo["method"] == "l0":
            for ffn, n in ((layer.ffn1, entry["ffn1"]), (layer.ffn2, entry["ffn2"])):
                if n > ffn.hidden:
                    raise SurgeryError(f"{ffn.path}: recorded width {n} exceeds {ffn.hidden}")
                shrink_ffn(ffn, np.arange(n), np.ones(n))
            shrink_attention(layer.attn, np.arange(entry["heads"]), np.ones(entry["heads"]))
            shrink_conv(layer.conv, np.arange(entry["conv"]), np.ones(entry["conv"]))
        else:
            for sub, attr in DENSE_SLOTS:
                holder = getattr(layer, sub)
                dense = getattr(holder, attr)
                r = entry["ranks"][attr_path(sub, attr)]
                z = np.zeros(dense.r)
                z[:r] = 1.0
                setattr(holder, attr, prune_ranks(dense, z))
    model.assign_paths("encoder" if model is enc else "")
    return model
