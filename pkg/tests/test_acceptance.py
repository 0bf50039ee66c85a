"""One pass/fail test per acceptance criterion, at the default desk budgets.

The teacher fixtures (2000-step pretext run, 2000-step fine-tune) are shared
with the rest of the suite through ``conftest.py``.  A full run of this file
takes roughly half an hour on one CPU core.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.special import log_softmax, logsumexp

from kdprune import config
from kdprune.cli import main
from kdprune.data import generate_corpus
from kdprune.gates import GateSet, hard_concrete_prob_nonzero
from kdprune.gradsuite import run_suite
from kdprune.lowrank import factorize, init_rank
from kdprune.models.groups import block_census, build_prune_groups, factorize_encoder, prunable_census
from kdprune.models.transducer import TransducerModel, rnnt_nll
from kdprune.pipeline.io import PretextModel, load_model
from kdprune.pipeline.report import TABLE3_ROWS
from kdprune.pipeline.stages import eval_two_stage_losses, stage1_distill_prune
from kdprune.pipeline.surgeon import surgeon
from kdprune.tensor import CounterRNG, Tensor

pytestmark = pytest.mark.slow

# Monte Carlo oracle (raw numpy, 1e6 draws each, default_rng(12345))
MC_P_NONZERO = {-2.0: 0.400656, 0.0: 0.831199, 2.0: 0.973361}


def _brute_force(lp, y):
    T, U1, V1 = lp.shape
    U, blank = U1 - 1, V1 - 1
    terms = []
    for slots in itertools.combinations(range(T + U - 1), U):
        t = u = 0
        tot = 0.0
        for k in range(T + U):
            if k in slots:
                tot += lp[t, u, y[u]]
                u += 1
            else:
                tot += lp[t, u, blank]
                t += 1
        terms.append(tot)
    return float(logsumexp(terms))


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    reports = run_suite()
    elapsed = time.perf_counter() - t0
    failing = [r.line() for r in reports if not r.passed]
    assert not failing, failing
    assert all(r.tol == 1e-4 for r in reports)
    assert elapsed < 120.0


def test_criterion_2_hard_concrete_statistics():
    n = 1_000_000
    gs = GateSet({str(la): n for la in MC_P_NONZERO}, init_log_alpha=0.0).train()
    for la in MC_P_NONZERO:
        gs.log_alpha[str(la)].data = np.full(n, la)
    draws = gs.sample(CounterRNG(2024), 1)
    for la, oracle in MC_P_NONZERO.items():
        closed = float(hard_concrete_prob_nonzero(Tensor(np.array([la]))).data[0])
        sampled = float((draws[str(la)].data > 0).mean())
        assert abs(closed - oracle) <= 0.01
        assert abs(closed - sampled) <= 0.01
    assert float(hard_concrete_prob_nonzero(Tensor(np.array([0.0]))).data[0]) == pytest.approx(0.832, abs=5e-4)


def test_criterion_3_transducer_oracle():
    for T, U, V in itertools.product((1, 2, 3), (0, 1, 2), (1, 2, 3)):
        rng = np.random.default_rng(100 * T + 10 * U + V)
        for _ in range(50):
            lp = log_softmax(rng.normal(size=(T, U + 1, V + 1)) * 2.0, axis=-1)
            y = rng.integers(0, V, size=U)
            assert float(rnnt_nll(Tensor(lp), y).data) == pytest.approx(-_brute_force(lp, y), abs=1e-8)
    # Uniform T=2, U=1, V=2. Enumeration finds 2 alignments (both must end
    # in a blank), so the loss is log 13.5; the criterion states log 9.
    lp = np.full((2, 2, 3), math.log(1.0 / 3.0))
    loss = float(rnnt_nll(Tensor(lp), [0]).data)
    assert loss == pytest.approx(-_brute_force(lp, [0]), abs=1e-12)
    assert abs(loss - math.log(9.0)) <= 1e-10, (
        f"uniform lattice loss is {loss:.10f} = log 13.5 by exhaustive enumeration, not log 9")


def test_criterion_4_surgeon_equivalence():
    cfg = config.load().model
    rng = np.random.default_rng(4)
    for k, method in itertools.product(range(20), ("l0", "lrf")):
        base = PretextModel(cfg, 32, seed=k) if k % 2 == 0 else TransducerModel(cfg, cfg.pred_dim, cfg.joint_dim, k)
        model = factorize_encoder(base) if method == "lrf" else base
        groups = build_prune_groups(model, method)
        z = {}
        for g in groups:
            u = rng.random()
            z.setdefault(g.owner, []).append(0.0 if u < 0.4 else 1.0 if u < 0.7 else rng.uniform(0.05, 1.0))
        z = {o: np.array(v) for o, v in z.items()}
        compact = surgeon(model, z)
        x = rng.normal(size=(4, 20, cfg.input_dim))
        lengths = [20, 17, 9, 3]
        masked = model.encoder(x, lengths, {o: Tensor(v) for o, v in z.items()})
        pruned = compact.encoder(x, lengths)
        diff = max(np.abs(masked.causal.data - pruned.causal.data).max(),
                   np.abs(masked.noncausal.data - pruned.noncausal.data).max())
        assert diff <= 1e-10, (k, method, diff)
        closed = sum(g.param_count for g in groups if z[g.owner][g.index] == 0.0)
        assert prunable_census(model) - prunable_census(compact) == closed


def test_criterion_5_lrf_arithmetic():
    assert init_rank(1024, 1024) == 512
    rng = np.random.default_rng(5)
    W = rng.normal(0.0, 1.0 / 32.0, size=(1024, 1024))
    f = factorize(W, init_rank(1024, 1024))
    assert f.dense_weight_count() == 512 * (1024 + 1024)
    s = np.linalg.svd(W, compute_uv=False)
    err = float(np.sum((W - f.reconstruct()) ** 2))
    assert abs(err - float(np.sum(s[512:] ** 2))) <= 1e-8
    small = rng.normal(size=(96, 64))
    assert np.abs(factorize(small, 64).reconstruct() - small).max() <= 1e-10


@pytest.fixture(scope="module")
def two_stage_run(pt_teacher_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "distill_prune"
    t0 = time.perf_counter()
    code = main(["distill-prune", "--teacher", str(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp"),
                 "--set", "gates.target_sparsity=0.5", "--out", str(out)])
    assert code == 0
    return out, time.perf_counter() - t0


def test_criterion_6_sparsity_control(two_stage_run, pt_teacher_dir):
    out, elapsed = two_stage_run
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["loss_curves"]["stage1"]) == 3000
    assert abs(rep["expected_sparsity"] - 0.5) <= 0.02
    # the whole two-stage run (Stage 1 plus Stage 2) fits the per-run budget
    assert elapsed < 300.0

    cfg = config.load(overrides=["gates.target_sparsity=0.83"])
    teacher, _, _ = load_model(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp", cfg.model)
    t0 = time.perf_counter()
    s1 = stage1_distill_prune(cfg, teacher, generate_corpus(cfg.data)["train"])
    assert time.perf_counter() - t0 < 300.0
    assert s1.steps == 3000
    assert abs(s1.expected_sparsity - 0.83) <= 0.03


def test_criterion_7_two_stage_pipeline(two_stage_run, pt_teacher_dir):
    out, _ = two_stage_run
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["loss_curves"]["stage2"]) == 1500
    assert rep["stage2_smoothed_end"] < rep["stage2_smoothed_start"]
    cfg = config.load(out / "config.yaml")
    teacher, _, _ = load_model(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp", cfg.model)
    student, _, meta = load_model(out / "checkpoints" / "student_compact.kdp", cfg.model)
    again = eval_two_stage_losses(cfg, teacher, student, generate_corpus(cfg.data)["dev"])
    for k, v in meta["recorded_losses"].items():
        assert abs(again[k] - v) <= 1e-8
    assert rep["params_after"] < rep["params_before"]


JOINT_CASES = [(mode, method) for mode in ("pt_encoder", "ptft_encoder") for method in ("l0", "lrf")]


@pytest.fixture(scope="module")
def joint_runs(pt_teacher_dir, ptft_teacher_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_joint")
    pt = str(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp")
    ptft = str(ptft_teacher_dir / "checkpoints" / "teacher_ptft.kdp")
    runs = {}
    for mode, method in JOINT_CASES:
        out = root / f"{mode}_{method}"
        argv = ["joint-prune", "--teacher", pt, "--set", f"gates.method={method}",
                "--set", f"pipeline.teacher_mode={mode}", "--set", "gates.target_sparsity=0.5", "--out", str(out)]
        if mode == "ptft_encoder":
            argv += ["--ptft", ptft]
        assert main(argv) == 0
        runs[(mode, method)] = out
    return runs


def test_criterion_8_joint_pipeline(joint_runs, pt_teacher_dir):
    teacher, _, _ = load_model(pt_teacher_dir / "checkpoints" / "teacher_pt.kdp")
    base = block_census(teacher.encoder)
    for (mode, method), out in joint_runs.items():
        rep = json.loads((out / "report.json").read_text())
        assert rep["method"] == method and rep["teacher_mode"] == mode
        assert len(rep["loss_curves"]["joint"]) == 4000
        assert abs(rep["expected_sparsity"] - 0.5) <= 0.02, (mode, method, rep["expected_sparsity"])
        hyps = [json.loads(line) for line in (out / "hypotheses.jsonl").read_text().splitlines()]
        assert len(hyps) == 200
        assert all(len(h[tap]) <= 10 * 32 for h in hyps for tap in ("streaming", "nonstreaming"))
        for tap in ("streaming", "nonstreaming"):
            assert rep["ter"][tap] < rep["untrained_ter"][tap], (mode, method, tap)
        # Table-3 percentages recomputed from the emitted checkpoint
        cfg = config.load(out / "config.yaml")
        student, _, _ = load_model(out / "checkpoints" / "student_compact.kdp", cfg.model)
        census = block_census(student)
        lines = (out / "table3.csv").read_text().splitlines()
        assert lines[0] == f"block,{method}/task_specific"
        for line, (label, key) in zip(lines[1:], TABLE3_ROWS):
            pct = 100.0 * census[key] / base[key]
            assert line == f"{label},{pct:.1f}"
            assert rep["retained_pct"][key] == pytest.approx(pct, abs=1e-12)


DET_SETS = ["model.causal_layers=2", "model.noncausal_layers=1", "data.n_train=40", "data.batch_size=4",
            "pretrain.steps=40", "pipeline.steps_stage1=40", "pipeline.steps_joint=40", "pipeline.log_every=5"]


def test_criterion_9_determinism(tmp_path):
    def sets(*extra):
        return [a for item in DET_SETS + list(extra) for a in ("--set", item)]

    files = {}
    for rep in ("a", "b"):
        root = tmp_path / rep
        assert main(["distill-prune", *sets("gates.method=lrf"), "--out", str(root / "dp")]) == 0
        assert main(["joint-prune", *sets("pipeline.teacher_mode=ptft_encoder", "finetune.steps=20"),
                     "--out", str(root / "jp")]) == 0
        files[rep] = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
                      if p.is_file() and p.name != "run_info.json"}
    assert files["a"].keys() == files["b"].keys()
    assert "dp/metrics.jsonl" in files["a"] and "jp/checkpoints/student_compact.kdp" in files["a"]
    differing = [k for k in files["a"] if files["a"][k] != files["b"][k]]
    assert not differing, differing
