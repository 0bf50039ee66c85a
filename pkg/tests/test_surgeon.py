import numpy as np
import pytest

from kdprune.models.conformer import CascadedEncoder, ConformerConfig
from kdprune.models.groups import build_prune_groups, factorize_encoder, prunable_census
from kdprune.models.transducer import TransducerModel
from kdprune.pipeline.surgeon import SurgeryError, apply_topology, surgeon, topology
from kdprune.tensor import Tensor

CFG = ConformerConfig(causal_layers=2, noncausal_layers=1, model_dim=16, heads=4, ffn_mult=2, conv_kernel=3,
                      vocab_size=4, input_dim=6, max_len=20)


def _owners(groups):
    sizes = {}
    for g in groups:
        sizes[g.owner] = sizes.get(g.owner, 0) + 1
    return sizes


def random_snapshot(groups, rng, p_closed=0.35, p_open=0.3):
    z = {}
    for owner, n in _owners(groups).items():
        u = rng.random(n)
        v = np.where(u < p_closed, 0.0, np.where(u < p_closed + p_open, 1.0, rng.uniform(0.05, 1.0, n)))
        z[owner] = v
    return z


def _student(method, seed=0):
    enc = CascadedEncoder(CFG, seed)
    return factorize_encoder(enc) if method == "lrf" else enc


def _max_diff(a, b, x, lengths, gates):
    oa = a(x, lengths, {k: Tensor(v) for k, v in gates.items()})
    ob = b(x, lengths)
    return max(np.abs(oa.causal.data - ob.causal.data).max(), np.abs(oa.noncausal.data - ob.noncausal.data).max())


@pytest.mark.parametrize("method", ["l0", "lrf"])
def test_masked_and_compact_forward_agree(method):
    rng = np.random.default_rng(11)
    for snap in range(20):
        enc = _student(method, seed=snap)
        groups = build_prune_groups(enc, method)
        z = random_snapshot(groups, rng)
        compact = surgeon(enc, z)
        x = rng.normal(size=(3, 9, CFG.input_dim))
        assert _max_diff(enc, compact, x, [9, 6, 2], z) <= 1e-10
        closed = sum(g.param_count for g in groups if z[g.owner][g.index] == 0.0)
        assert prunable_census(enc) - prunable_census(compact) == closed


def test_no_gate_closed_keeps_census():
    enc = _student("l0")
    z = {o: np.ones(n) for o, n in _owners(build_prune_groups(enc)).items()}
    compact = surgeon(enc, z)
    assert prunable_census(compact) == prunable_census(enc)
    assert sum(p.size for p in compact.parameters()) == sum(p.size for p in enc.parameters())


def test_one_ffn_unit_closed():
    enc = _student("l0")
    groups = build_prune_groups(enc)
    z = {o: np.ones(n) for o, n in _owners(groups).items()}
    owner = enc.causal[0].ffn1.path
    z[owner][3] = 0.0
    compact = surgeon(enc, z)
    assert prunable_census(enc) - prunable_census(compact) == 2 * CFG.model_dim
    assert compact.causal[0].ffn1.hidden == CFG.model_dim * CFG.ffn_mult - 1


def test_head_removal_matches_masked_model(rng):
    enc = _student("l0", seed=4)
    groups = build_prune_groups(enc)
    z = {o: np.ones(n) for o, n in _owners(groups).items()}
    z[enc.noncausal[0].attn.path] = np.array([1.0, 0.0, 0.0, 1.0])
    compact = surgeon(enc, z)
    assert compact.noncausal[0].attn.heads == 2
    assert _max_diff(enc, compact, rng.normal(size=(100, 5, CFG.input_dim)), None, z) <= 1e-10


def test_surgeon_on_transducer_keeps_predictor(rng):
    m = TransducerModel(CFG, 8, 8, seed=1)
    groups = build_prune_groups(m)
    z = random_snapshot(groups, rng)
    compact = surgeon(m, z)
    assert np.array_equal(compact.joint.out.weight.data, m.joint.out.weight.data)
    assert compact.encoder.causal[0].path == "encoder.causal.0"


def test_missing_or_misshapen_snapshot_errors():
    enc = _student("l0")
    z = {o: np.ones(n) for o, n in _owners(build_prune_groups(enc)).items()}
    bad = dict(z)
    bad.pop(enc.causal[1].conv.path)
    with pytest.raises(SurgeryError, match="conv"):
        surgeon(enc, bad)
    bad = dict(z)
    bad[enc.causal[0].attn.path] = np.ones(3)
    with pytest.raises(SurgeryError, match="shape"):
        surgeon(enc, bad)
    with pytest.raises(SurgeryError):
        surgeon(enc, {})


@pytest.mark.parametrize("method", ["l0", "lrf"])
def test_topology_roundtrip(method, rng):
    enc = _student(method, seed=2)
    compact = surgeon(enc, random_snapshot(build_prune_groups(enc, method), rng))
    topo = topology(compact)
    rebuilt = apply_topology(CascadedEncoder(CFG, 99), topo)
    assert [p.shape for p in rebuilt.parameters()] == [p.shape for p in compact.parameters()]
