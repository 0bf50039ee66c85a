import numpy as np
import pytest

from kdprune.config import ModelConfig
from kdprune.models.conformer import ConformerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    return ConformerConfig(causal_layers=2, noncausal_layers=1, model_dim=8, heads=2, ffn_mult=2,
                           conv_kernel=3, vocab_size=4, input_dim=5, max_len=16)


@pytest.fixture
def desk_cfg():
    return ModelConfig()


SMALL_RUN = ["model.causal_layers=2", "model.noncausal_layers=1", "model.model_dim=16", "model.heads=2",
             "model.ffn_mult=2", "model.conv_kernel=3", "model.pred_dim=16", "model.joint_dim=16",
             "data.n_train=24", "data.n_dev=8", "data.n_test=8", "data.batch_size=4",
             "pretrain.steps=30", "finetune.steps=20", "pipeline.steps_stage1=30", "pipeline.steps_joint=30",
             "pipeline.log_every=5", "optim.warmup_steps=5"]


@pytest.fixture
def small_run_cfg():
    """Factory for a seconds-scale run configuration; extra overrides win."""
    from kdprune import config

    def make(*overrides):
        return config.load(overrides=SMALL_RUN + list(overrides))

    return make


@pytest.fixture(scope="session")
def pt_teacher_dir(tmp_path_factory):
    """Default-budget pretext teacher (2000 steps), trained once per session."""
    from kdprune.cli import main

    out = tmp_path_factory.mktemp("teachers") / "pt"
    assert main(["pretrain-teacher", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def ptft_teacher_dir(pt_teacher_dir, tmp_path_factory):
    from kdprune.cli import main

    out = tmp_path_factory.mktemp("teachers") / "ptft"
    assert main(["finetune-teacher", "--teacher", str(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp"),
                 "--out", str(out)]) == 0
    return out
