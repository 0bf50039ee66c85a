"""Model checkpoints on top of the tensor container.

Tensor names: ``model/<module path>/<param>`` for ordinary parameters,
``lrf/<layer path>/{A,B,bias}`` for factorized layers, and
``gates/<layer path>/log_alpha``, ``lagrangian/{lambda1,lambda2,t}`` and
``masks/<layer path>`` for gate state.  The header ``meta`` records the model
kind, model config and topology (heads, widths, ranks per layer).
"""

from __future__ import annotations

import dataclasses
import os
from typing import Mapping

import numpy as np

from .. import checkpoint
from ..config import ModelConfig
from ..gates import GateSet, LagrangianState
from ..lowrank import FactorizedLinear
from ..models.conformer import CascadedEncoder
from ..models.transducer import TransducerModel
from ..nn import Linear, Module
from .surgeon import apply_topology, topology


class LoadError(ValueError):
    pass


class PretextModel(Module):
    """Encoder plus a linear head predicting quantizer codes from both taps."""

    def __init__(self, cfg: ModelConfig, n_codes: int, seed: int = 0, encoder: CascadedEncoder | None = None):
        self.encoder = encoder if encoder is not None else CascadedEncoder(cfg, seed)
        self.head = Linear(cfg.model_dim, n_codes, np.random.default_rng(seed + 2))
        self.cfg = cfg
        self.assign_paths()


def _slash(path: str) -> str:
    return path.replace(".", "/")


def model_tensors(model: Module) -> dict[str, np.ndarray]:
    out = {}
    for path, mod in model.named_modules():
        for attr, val in vars(mod).items():
            if attr.startswith("_") or not hasattr(val, "data") or not hasattr(val, "requires_grad"):
                continue
            if isinstance(mod, FactorizedLinear):
                out[f"lrf/{_slash(path)}/{attr}"] = val.data
            else:
                out[f"model/{_slash(f'{path}.{attr}' if path else attr)}"] = val.data
    return out


def _assign(model: Module, tensors: Mapping[str, np.ndarray]) -> None:
    expected = model_tensors(model)
    for name in sorted(expected):
        if name not in tensors:
            raise LoadError(f"checkpoint lacks tensor {name!r} required by the configured topology")
        if tuple(tensors[name].shape) != tuple(expected[name].shape):
            raise LoadError(f"tensor {name!r}: checkpoint shape {tuple(tensors[name].shape)} "
                            f"does not match configured shape {tuple(expected[name].shape)}")
    for path, mod in model.named_modules():
        prefix = f"lrf/{_slash(path)}/" if isinstance(mod, FactorizedLinear) else None
        for attr, val in list(vars(mod).items()):
            if attr.startswith("_") or not hasattr(val, "requires_grad"):
                continue
            key = prefix + attr if prefix else f"model/{_slash(f'{path}.{attr}' if path else attr)}"
            val.data = np.array(tensors[key], dtype=np.float64)


def build_model(kind: str, cfg: ModelConfig, n_codes: int = 32, seed: int = 0) -> Module:
    if kind == "pretext":
        return PretextModel(cfg, n_codes, seed)
    if kind == "transducer":
        return TransducerModel(cfg, cfg.pred_dim, cfg.joint_dim, seed)
    if kind == "encoder":
        return CascadedEncoder(cfg, seed)
    raise LoadError(f"unknown model kind {kind!r}")


def save_model(path: str | os.PathLike, model: Module, kind: str, cfg: ModelConfig,
               gates: GateSet | None = None, lagrangian: LagrangianState | None = None,
               masks: Mapping | None = None, meta: Mapping | None = None) -> None:
    tensors = model_tensors(model)
    if gates is not None:
        tensors.update(gates.state())
    if lagrangian is not None:
        tensors.update(lagrangian.state())
    if masks is not None:
        for owner, z in masks.items():
            tensors[f"masks/{_slash(owner)}"] = np.asarray(getattr(z, "data", z))
    info = {
        "kind": kind,
        "model_config": dataclasses.asdict(cfg),
        "topology": topology(model),
        "n_codes": int(model.head.n_out) if kind == "pretext" else None,
        "gate_constants": None if gates is None else
        {"beta": gates.beta, "stretch_lo": gates.stretch_lo, "stretch_hi": gates.stretch_hi},
        "gate_owners": None if gates is None else gates.owners,
    }
    info.update(meta or {})
    checkpoint.save(path, tensors, info)


def load_model(path: str | os.PathLike, cfg: ModelConfig | None = None):
    """Rebuild the model recorded in a checkpoint.

    With ``cfg`` given, the model is built from that config (plus the recorded
    topology) and any tensor whose shape disagrees raises :class:`LoadError`
    naming the first mismatched tensor.  Returns ``(model, tensors, meta)``.
    """
    tensors, meta = checkpoint.load(path)
    model_cfg = cfg if cfg is not None else ModelConfig(**meta["model_config"])
    model = build_model(meta["kind"], model_cfg, meta.get("n_codes") or 32)
    try:
        model = apply_topology(model, meta["topology"])
    except (KeyError, ValueError, RuntimeError) as e:
        raise LoadError(f"topology in {path} does not fit the configured model: {e}") from None
    _assign(model, tensors)
    return model, tensors, meta


def load_gates(tensors: Mapping, meta: Mapping) -> tuple[GateSet | None, LagrangianState | None]:
    if not meta.get("gate_owners"):
        return None, None
    owners = meta["gate_owners"]
    slices = {o: tensors[f"gates/{_slash(o)}/log_alpha"].shape[0] for o in owners}
    gs = GateSet(slices, **meta["gate_constants"])
    gs.load_state(tensors)
    lag = None
    if "lagrangian/t" in tensors:
        lag = LagrangianState.create(float(tensors["lagrangian/t"]), 0)
        lag.load_state(tensors)
    return gs, lag
