"""Run configuration: a YAML tree mapped onto nested dataclasses.

Grammar: the file is a YAML mapping whose top-level keys are the section
names below (``seed`` is a scalar).  Every key must name an existing field;
unknown keys are rejected.  Command-line overrides use dotted paths,
``section.field=value``, where ``value`` is parsed as a YAML scalar.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import CorpusConfig
from .models.conformer import ConformerConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig(ConformerConfig):
    pred_dim: int = 32
    joint_dim: int = 32


@dataclass
class DataConfig(CorpusConfig):
    batch_size: int = 8


@dataclass
class GateConfig:
    method: str = "l0"
    beta: float = 2.0 / 3.0
    stretch_lo: float = -0.1
    stretch_hi: float = 1.1
    init_log_alpha: float = 2.5
    target_sparsity: float = 0.5
    warmup_fraction: float = 1.0 / 3.0
    lr: float = 0.05
    lambda_lr: float = 2.0
    penalty_mode: str = "lagrangian"
    fixed_weight: float = 1.0


@dataclass
class DistillConfig:
    use_kd: bool = True
    weight_l1: float = 0.5
    weight_cos: float = 0.5
    layer_rule: str = "first_middle_last"
    stride: int = 5
    kd_weight: float = 1.0
    cache_teacher: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


@dataclass
class PretrainConfig:
    steps: int = 2000
    mask_prob: float = 0.15
    mask_span: int = 3
    n_codes: int = 32
    code_dim: int = 8
    mask_noise: float = 0.1


@dataclass
class FinetuneConfig:
    steps: int = 2000


@dataclass
class PipelineConfig:
    scenario: str = "task_agnostic"
    teacher_mode: str = "pt_encoder"
    steps_stage1: int = 3000
    steps_stage2: typing.Optional[int] = None
    steps_joint: int = 4000
    log_every: int = 10
    flops_ref_len: int = 100
    eval_batch_size: int = 25
    max_symbols: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gates: GateConfig = field(default_factory=GateConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    # convenience views used across the pipeline
    @property
    def method(self) -> str:
        return self.gates.method

    @property
    def steps_stage2(self) -> int:
        s2 = self.pipeline.steps_stage2
        return self.pipeline.steps_stage1 // 2 if s2 is None else s2

    def validate(self) -> "RunConfig":
        g, p = self.gates, self.pipeline
        _choice("gates.method", g.method, ("l0", "lrf"))
        _choice("gates.penalty_mode", g.penalty_mode, ("lagrangian", "fixed"))
        _choice("pipeline.scenario", p.scenario, ("task_agnostic", "task_specific"))
        _choice("pipeline.teacher_mode", p.teacher_mode, ("pt_encoder", "ptft_encoder"))
        _choice("distill.layer_rule", self.distill.layer_rule, ("stride", "first_middle_last"))
        if not 0.0 <= g.target_sparsity < 1.0:
            raise ConfigError(f"gates.target_sparsity must lie in [0, 1), got {g.target_sparsity}")
        if not (g.stretch_lo < 0.0 < 1.0 < g.stretch_hi):
            raise ConfigError("gates.stretch_lo < 0 < 1 < gates.stretch_hi is required")
        if self.model.input_dim != self.data.input_dim or self.model.vocab_size != self.data.vocab_size:
            raise ConfigError("model.input_dim/vocab_size must match data.input_dim/vocab_size")
        if self.data.max_labels * self.data.max_dur > self.model.max_len:
            raise ConfigError("longest synthetic utterance exceeds model.max_len")
        for name in ("steps_stage1", "steps_joint"):
            if getattr(p, name) < 0:
                raise ConfigError(f"pipeline.{name} must be non-negative")
        if self.pretrain.mask_prob <= 0:
            raise ConfigError("pretrain.mask_prob must be positive (masked prediction needs masked frames)")
        try:
            ModelConfig.__post_init__(self.model)
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None
        return self

    def model_config(self) -> ConformerConfig:
        return self.model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(f"{key} must be one of {options}, got {value!r}")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {(path + '.' if path else '') + unknown[0]!r}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        key = f"{path}.{k}" if path else k
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, key)
        else:
            kwargs[k] = _coerce(v, t, key)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def _coerce(v, t, key):
    if typing.get_origin(t) is typing.Union:
        args = [a for a in typing.get_args(t) if a is not type(None)]
        if v is None:
            return None
        t = args[0]
    if t is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{key} expects a boolean, got {v!r}")
        return v
    if t is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key} expects an integer, got {v!r}")
        return v
    if t is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} expects a number, got {v!r}")
        return float(v)
    if t is str:
        if not isinstance(v, str):
            raise ConfigError(f"{key} expects a string, got {v!r}")
        return v
    return v


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def apply_overrides(data: dict, overrides: typing.Sequence[str]) -> dict:
    """Apply ``a.b=value`` overrides to a raw config mapping (in place)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        cls = RunConfig
        node = data
        for i, part in enumerate(parts):
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if part not in fields:
                raise ConfigError(f"invalid override path {key!r}")
            t = typing.get_type_hints(cls)[part]
            last = i == len(parts) - 1
            if dataclasses.is_dataclass(t):
                if last:
                    raise ConfigError(f"override {key!r} names a section, not a field")
                node = node.setdefault(part, {})
                cls = t
            else:
                if not last:
                    raise ConfigError(f"invalid override path {key!r}")
                node[part] = yaml.safe_load(raw)
    return data


def load(path: str | os.PathLike | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        data = yaml.safe_load(p.read_text()) or {}
    return from_dict(apply_overrides(data, overrides))


def dump(cfg: RunConfig, path: str | os.PathLike) -> None:
    data = cfg.to_dict()
    data["pipeline"]["steps_stage2"] = cfg.steps_stage2
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True))
