"""One function per CLI verb.  Each writes a self-contained artifact directory.

Layout of ``out/``::

    config.yaml        resolved configuration
    metrics.jsonl      deterministic per-step metrics (no timestamps)
    run_info.json      timestamps, host, argv (excluded from determinism checks)
    report.json        verb-specific report
    checkpoints/       checkpoints produced by the run, plus MANIFEST.json
"""

from __future__ import annotations

import hashlib
import json
import platform
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import __version__
from .. import config as config_mod
from .. import tensor as tc
from ..config import RunConfig
from ..data import SPLITS, Corpus, generate_corpus, read_corpus, write_corpus
from ..models.transducer import TransducerModel, greedy_decode, token_error_rate
from ..nn import Module
from .io import LoadError, PretextModel, load_model, save_model
from .loop import MetricsLog, smoothed
from .report import CompressionReport, build_report, census_and_flops, table3_csv
from .stages import (eval_joint_losses, eval_two_stage_losses, joint_prune_finetune, joint_student,
                     two_stage)
from .teacher import finetune_teacher, pretrain_teacher

ARTIFACTS = ("config.yaml", "metrics.jsonl", "run_info.json", "report.json", "checkpoints")


class RunError(RuntimeError):
    pass


class RunDir:
    def __init__(self, out: str | Path, cfg: RunConfig, verb: str, force: bool = False, argv=None):
        self.path = Path(out)
        if self.path.exists() and any(self.path.iterdir()):
            if not force:
                raise FileExistsError(f"output directory {self.path} is not empty; pass --force to overwrite")
            for name in ARTIFACTS + ("table3.csv", "hypotheses.jsonl", "data", "groups.csv"):
                p = self.path / name
                if p.is_dir():
                    shutil.rmtree(p)
                elif p.exists():
                    p.unlink()
        self.ckpt = self.path / "checkpoints"
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        config_mod.dump(cfg, self.path / "config.yaml")
        self.metrics_path = self.path / "metrics.jsonl"
        self.metrics_path.write_text("")
        self.started = time.time()
        self.info = {"verb": verb, "argv": list(argv or []), "version": __version__,
                     "python": sys.version.split()[0], "numpy": np.__version__, "host": platform.node(),
                     "started_unix": self.started}
        self.inputs: dict[str, str] = {}

    def log(self, last_step: int | None = None) -> MetricsLog:
        return MetricsLog(self.metrics_path, self.cfg.pipeline.log_every, last_step)

    def note_input(self, name: str, path: str | Path) -> None:
        self.inputs[name] = str(path)

    def finish(self, report: dict | CompressionReport) -> None:
        data = report.to_dict() if isinstance(report, CompressionReport) else report
        (self.path / "report.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        manifest = {p.name: _sha256(p) for p in sorted(self.ckpt.glob("*.kdp"))}
        (self.ckpt / "MANIFEST.json").write_text(
            json.dumps({"produced": manifest, "inputs": self.inputs}, indent=2, sort_keys=True) + "\n")
        self.info["finished_unix"] = time.time()
        self.info["elapsed_s"] = self.info["finished_unix"] - self.started
        (self.path / "run_info.json").write_text(json.dumps(self.info, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def get_corpus(cfg: RunConfig, data_dir: str | Path | None) -> Corpus:
    if data_dir is None:
        return generate_corpus(cfg.data)
    return read_corpus(data_dir)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def run_gen_data(cfg: RunConfig, out: str | Path, force: bool = False, argv=None) -> dict:
    from scipy.stats import chisquare

    rd = RunDir(out, cfg, "gen-data", force, argv)
    corpus = generate_corpus(cfg.data)
    files = write_corpus(rd.path / "data", corpus, cfg.data, force=True)
    labels = np.concatenate([u.labels for s in SPLITS for u in corpus[s]])
    counts = np.bincount(labels, minlength=cfg.data.vocab_size)
    chi2 = chisquare(counts)
    report = {"splits": {s: len(corpus[s]) for s in SPLITS},
              "frames": {s: int(sum(u.num_frames for u in corpus[s])) for s in SPLITS},
              "label_counts": counts.tolist(), "chi2": float(chi2.statistic), "chi2_p": float(chi2.pvalue),
              "files": {f.name: _sha256(f) for f in files}}
    rd.log().write(step=0, stage="gen-data", **{f"n_{s}": len(corpus[s]) for s in SPLITS})
    rd.finish(report)
    return report


def run_pretrain(cfg: RunConfig, out, data_dir=None, force=False, argv=None) -> dict:
    rd = RunDir(out, cfg, "pretrain-teacher", force, argv)
    corpus = get_corpus(cfg, data_dir)
    model, quant, curve = pretrain_teacher(cfg, corpus["train"], rd.log(cfg.pretrain.steps))
    recorded = eval_pretext(cfg, model, corpus["dev"])
    save_model(rd.ckpt / "teacher_pt.kdp", model, "pretext", cfg.model,
               meta={"recorded_losses": recorded, "quantizer_seed": cfg.seed})
    sm = smoothed(curve, 50) if curve else np.zeros(1)
    start = float(np.mean(curve[:50])) if curve else float("nan")
    end = float(np.mean(curve[-50:])) if curve else float("nan")
    report = {"steps": len(curve), "ce_first50": start, "ce_last50": end,
              "ce_reduction": (start - end) / start if curve else 0.0, "smoothed_final": float(sm[-1]),
              "recorded_losses": recorded, "quantizer_attempts": quant.attempts,
              "census": census_and_flops(model, cfg.pipeline.flops_ref_len)}
    rd.finish(report)
    return report


def eval_pretext(cfg: RunConfig, model: PretextModel, utts) -> dict[str, float]:
    return {"pretext": eval_two_stage_losses(cfg, model, model, utts)["pretext"]}


def run_finetune(cfg: RunConfig, out, teacher_path, data_dir=None, force=False, argv=None) -> dict:
    rd = RunDir(out, cfg, "finetune-teacher", force, argv)
    rd.note_input("teacher_pt", teacher_path)
    pretext = _load(teacher_path, cfg, "pretext")
    corpus = get_corpus(cfg, data_dir)
    model, curve = finetune_teacher(cfg, pretext, corpus["train"], rd.log(cfg.finetune.steps))
    recorded = eval_joint_losses(cfg, model, None, corpus["dev"])
    save_model(rd.ckpt / "teacher_ptft.kdp", model, "transducer", cfg.model, meta={"recorded_losses": recorded})
    report = {"steps": len(curve), "loss_first50": float(np.mean(curve[:50])) if curve else None,
              "loss_last50": float(np.mean(curve[-50:])) if curve else None, "recorded_losses": recorded,
              "ter_train": decode_ter(cfg, model, corpus["train"])[0]}
    rd.finish(report)
    return report


def _load(path, cfg: RunConfig, kind: str) -> Module:
    model, _, meta = load_model(path, cfg.model)
    if meta["kind"] != kind:
        raise LoadError(f"{path}: expected a {kind} checkpoint, found {meta['kind']}")
    return model


def _teacher(cfg: RunConfig, rd: RunDir, teacher_path, corpus) -> PretextModel:
    if teacher_path is not None:
        rd.note_input("teacher_pt", teacher_path)
        return _load(teacher_path, cfg, "pretext")
    model, _, _ = pretrain_teacher(cfg, corpus["train"], rd.log(cfg.pretrain.steps))
    save_model(rd.ckpt / "teacher_pt.kdp", model, "pretext", cfg.model,
               meta={"recorded_losses": eval_pretext(cfg, model, corpus["dev"])})
    return model


def run_distill_prune(cfg: RunConfig, out, teacher_path=None, data_dir=None, force=False, argv=None) -> dict:
    """Two-stage pipeline: Stage 1 (distill + prune), surgeon, Stage 2 (distill)."""
    cfg = replace(cfg, pipeline=replace(cfg.pipeline, scenario="task_agnostic"))
    rd = RunDir(out, cfg, "distill-prune", force, argv)
    corpus = get_corpus(cfg, data_dir)
    teacher = _teacher(cfg, rd, teacher_path, corpus)
    s1, compact, s2 = two_stage(cfg, teacher, corpus["train"], rd.log(cfg.pipeline.steps_stage1))
    save_model(rd.ckpt / "stage1_gated.kdp", s1.model, "pretext", cfg.model, gates=s1.gates,
               lagrangian=s1.lagrangian, masks=s1.zhat)
    recorded = eval_two_stage_losses(cfg, teacher, s2.model, corpus["dev"])
    final_path = rd.ckpt / "student_compact.kdp"
    save_model(final_path, s2.model, "pretext", cfg.model, meta={"recorded_losses": recorded})
    reloaded = eval_two_stage_losses(cfg, teacher, _load(final_path, cfg, "pretext"), corpus["dev"])
    key = "distill" if cfg.distill.use_kd else "pretext"
    curves = {"stage1": s1.curves.get("loss", []), "stage2": s2.curves.get(key, []),
              "stage1_expected_sparsity": s1.curves.get("expected_sparsity", [])}
    rep = _report(cfg, teacher, s1.model, s2.model, s1.expected_sparsity, recorded, curves)
    data = rep.to_dict()
    data["reload_max_abs_diff"] = max(abs(recorded[k] - reloaded[k]) for k in recorded)
    st2 = s2.curves.get(key, [])
    if st2:
        sm = smoothed(st2, 50)
        data["stage2_smoothed_start"], data["stage2_smoothed_end"] = float(sm[min(49, len(sm) - 1)]), float(sm[-1])
    (rd.path / "table3.csv").write_text(table3_csv([rep]))
    rd.finish(data)
    return data


def run_joint(cfg: RunConfig, out, teacher_path=None, ptft_path=None, data_dir=None, force=False,
              argv=None) -> dict:
    """Joint prune-and-finetune with transducer loss, encoder KD and the penalty."""
    cfg = replace(cfg, pipeline=replace(cfg.pipeline, scenario="task_specific"))
    rd = RunDir(out, cfg, "joint-prune", force, argv)
    corpus = get_corpus(cfg, data_dir)
    pt = _teacher(cfg, rd, teacher_path, corpus)
    if cfg.pipeline.teacher_mode == "ptft_encoder":
        if ptft_path is not None:
            rd.note_input("teacher_ptft", ptft_path)
            ptft = _load(ptft_path, cfg, "transducer")
        else:
            ptft, _ = finetune_teacher(cfg, pt, corpus["train"], rd.log(cfg.finetune.steps))
            save_model(rd.ckpt / "teacher_ptft.kdp", ptft, "transducer", cfg.model)
        teacher_enc = ptft.encoder
    else:
        teacher_enc = pt.encoder
    untrained = joint_student(cfg, pt.encoder)
    res, compact = joint_prune_finetune(cfg, pt.encoder, teacher_enc, corpus["train"],
                                        rd.log(cfg.pipeline.steps_joint))
    kd_teacher = teacher_enc if cfg.distill.use_kd else None
    recorded = eval_joint_losses(cfg, compact, kd_teacher, corpus["dev"])
    final_path = rd.ckpt / "student_compact.kdp"
    save_model(final_path, compact, "transducer", cfg.model, meta={"recorded_losses": recorded})
    if res.gates is not None:
        save_model(rd.ckpt / "joint_gated.kdp", res.model, "transducer", cfg.model, gates=res.gates,
                   lagrangian=res.lagrangian, masks=res.zhat)
    reloaded = eval_joint_losses(cfg, _load(final_path, cfg, "transducer"), kd_teacher, corpus["dev"])
    ter, hyps = decode_ter(cfg, compact, corpus["train"])
    ter_dev, _ = decode_ter(cfg, compact, corpus["dev"])
    base_ter, _ = decode_ter(cfg, untrained, corpus["train"])
    curves = {"joint": res.curves.get("loss", []), "rnnt": res.curves.get("rnnt", []),
              "expected_sparsity": res.curves.get("expected_sparsity", [])}
    rep = _report(cfg, pt, res.model, compact, res.expected_sparsity, recorded, curves,
                  ter=ter, untrained_ter=base_ter)
    data = rep.to_dict()
    data["ter_dev"] = ter_dev
    data["reload_max_abs_diff"] = max(abs(recorded[k] - reloaded[k]) for k in recorded)
    (rd.path / "table3.csv").write_text(table3_csv([rep]))
    _write_hyps(rd.path / "hypotheses.jsonl", hyps)
    rd.finish(data)
    return data


def _report(cfg, teacher, gated, compact, expected, recorded, curves, ter=None, untrained_ter=None):
    T = cfg.pipeline.flops_ref_len
    return build_report(cfg, census_and_flops(teacher.encoder, T), census_and_flops(gated.encoder, T),
                        census_and_flops(compact.encoder, T), expected, ter=ter, untrained_ter=untrained_ter,
                        recorded_losses=recorded, loss_curves=curves)


def decode_ter(cfg: RunConfig, model: TransducerModel, utts) -> tuple[dict[str, float], list[dict]]:
    """Corpus TER per tap (total edits over total reference tokens) and hypotheses."""
    if not utts:
        raise RunError("cannot evaluate an empty split")
    from ..data import fixed_batches
    from ..models.transducer import edit_distance

    edits = {"streaming": 0, "nonstreaming": 0}
    ref_total = 0
    hyps = []
    with tc.no_grad():
        for b in fixed_batches(utts, cfg.pipeline.eval_batch_size):
            out = model.encoder(b.feats, b.lengths)
            for row, i in enumerate(b.index):
                n = int(b.lengths[row])
                ref = utts[i].labels.tolist()
                rec = {"index": int(i), "ref": ref}
                for tap, h in (("streaming", out.causal), ("nonstreaming", out.noncausal)):
                    hyp = greedy_decode(model, h.data[row, :n], cfg.pipeline.max_symbols)
                    edits[tap] += edit_distance(hyp, ref)
                    rec[tap] = hyp
                    rec[f"ter_{tap}"] = token_error_rate(hyp, ref)
                ref_total += max(1, len(ref))
                hyps.append(rec)
    return {k: v / ref_total for k, v in edits.items()}, hyps


def _write_hyps(path: Path, hyps: list[dict]) -> None:
    with path.open("w") as fh:
        for h in hyps:
            fh.write(json.dumps(h, sort_keys=True) + "\n")


def run_evaluate(cfg: RunConfig, out, checkpoint, split="dev", data_dir=None, force=False, argv=None) -> dict:
    rd = RunDir(out, cfg, "evaluate", force, argv)
    rd.note_input("checkpoint", checkpoint)
    model = _load(checkpoint, cfg, "transducer")
    corpus = get_corpus(cfg, data_dir)
    if split not in corpus.splits:
        raise RunError(f"unknown split {split!r}")
    ter, hyps = decode_ter(cfg, model, corpus[split])
    _write_hyps(rd.path / "hypotheses.jsonl", hyps)
    rd.log().write(step=0, stage="evaluate", split=split, **{f"ter_{k}": v for k, v in ter.items()})
    report = {"checkpoint": str(checkpoint), "split": split, "num_utterances": len(hyps), "ter": ter}
    rd.finish(report)
    return report


def run_report(cfg: RunConfig, out, run_dirs, force=False, argv=None) -> dict:
    """Merge the reports of several pipeline runs into one Table-3 CSV."""
    reports = []
    for d in run_dirs:
        p = Path(d) / "report.json"
        if not p.exists():
            raise RunError(f"{d} has no report.json")
        data = json.loads(p.read_text())
        fields = CompressionReport.__dataclass_fields__
        reports.append(CompressionReport(**{k: v for k, v in data.items() if k in fields}))
    if not reports:
        raise RunError("report needs at least one run directory")
    rd = RunDir(out, cfg, "report", force, argv)
    for d in run_dirs:
        rd.note_input(str(d), Path(d) / "report.json")
    text = table3_csv(reports)
    (rd.path / "table3.csv").write_text(text)
    summary = {r.column: {"retained_pct": r.retained_pct, "achieved_sparsity": r.achieved_sparsity,
                          "mflops_before": r.mflops_before, "mflops_after": r.mflops_after, "ter": r.ter}
               for r in reports}
    rd.log().write(step=0, stage="report", columns=[r.column for r in reports])
    rd.finish({"table3_csv": text, "runs": summary})
    return {"table3_csv": text, "runs": summary}


def run_grad_check(cfg: RunConfig, out, force=False, argv=None) -> dict:
    from ..gradsuite import run_suite

    rd = RunDir(out, cfg, "grad-check", force, argv)
    reports = run_suite()
    log = rd.log()
    for i, r in enumerate(reports):
        log.write(step=i, stage="grad-check", name=r.name, max_rel_err=r.max_rel_err, passed=r.passed)
    data = {"passed": all(r.passed for r in reports), "checks": [r.line() for r in reports]}
    rd.finish(data)
    return data
