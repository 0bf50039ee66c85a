import pytest

from kdprune import config
from kdprune.config import ConfigError, RunConfig


def test_defaults_validate():
    cfg = config.load()
    assert isinstance(cfg, RunConfig)
    assert cfg.gates.beta == pytest.approx(2 / 3)
    assert (cfg.gates.stretch_lo, cfg.gates.stretch_hi) == (-0.1, 1.1)
    assert cfg.pipeline.steps_stage1 == 3000 and cfg.steps_stage2 == 1500 and cfg.pipeline.steps_joint == 4000


def test_stage2_defaults_to_half_of_stage1():
    cfg = config.load(overrides=["pipeline.steps_stage1=301"])
    assert cfg.steps_stage2 == 150
    assert config.load(overrides=["pipeline.steps_stage2=7"]).steps_stage2 == 7


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("gates:\n  target_sparsty: 0.5\n")
    with pytest.raises(ConfigError, match="gates.target_sparsty"):
        config.load(p)


def test_overrides_and_types():
    cfg = config.load(overrides=["gates.method=lrf", "gates.target_sparsity=0.83", "distill.use_kd=false"])
    assert cfg.method == "lrf" and cfg.gates.target_sparsity == 0.83 and cfg.distill.use_kd is False
    with pytest.raises(ConfigError, match="invalid override path"):
        config.load(overrides=["gates.nope=1"])
    with pytest.raises(ConfigError):
        config.load(overrides=["gates=1"])
    with pytest.raises(ConfigError):
        config.load(overrides=["seed=abc"])
    with pytest.raises(ConfigError):
        config.load(overrides=["noequals"])


@pytest.mark.parametrize("override", ["gates.target_sparsity=1.0", "gates.method=l2", "pretrain.mask_prob=0",
                                      "gates.stretch_lo=0.1", "model.heads=5", "model.input_dim=3"])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        config.load(overrides=[override])


def test_dump_roundtrip(tmp_path):
    cfg = config.load(overrides=["seed=3", "gates.method=lrf"])
    config.dump(cfg, tmp_path / "c.yaml")
    again = config.load(tmp_path / "c.yaml")
    assert again.to_dict() == {**cfg.to_dict(), "pipeline": {**cfg.to_dict()["pipeline"], "steps_stage2": 1500}}
