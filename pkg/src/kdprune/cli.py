"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print exactly one line to stderr::

    kdprune: error[<category>]: <message>

The only environment variable read is ``KDPRUNE_OUTPUT_ROOT``, the parent
directory for ``--out`` when the flag is omitted (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import config as config_mod
from .checkpoint import CheckpointError
from .config import ConfigError

VERBS = ("gen-data", "pretrain-teacher", "finetune-teacher", "distill-prune", "joint-prune", "evaluate",
         "report", "grad-check")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults apply when omitted)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override a config field by dotted path, e.g. gates.target_sparsity=0.5 (repeatable)")
    p.add_argument("--out", metavar="DIR", help="artifact directory (default: $KDPRUNE_OUTPUT_ROOT/<verb> "
                                                 "or runs/<verb>)")
    p.add_argument("--force", action="store_true", help="overwrite an existing, non-empty artifact directory")
    if data:
        p.add_argument("--data", metavar="DIR", help="corpus directory written by gen-data "
                                                      "(default: regenerate from the data config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdprune", description="Structured pruning and distillation of a toy cascaded "
                                                  "conformer transducer.")
    parser.add_argument("--version", action="version", version=f"kdprune {__version__}")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write the synthetic train/dev/test corpus")
    _common(p, data=False)

    p = sub.add_parser("pretrain-teacher", help="masked code-prediction pretraining of the teacher encoder")
    _common(p)

    p = sub.add_parser("finetune-teacher", help="RNN-T fine-tuning of a pretrained teacher (PTFT encoder)")
    _common(p)
    p.add_argument("--teacher", required=True, metavar="CKPT", help="pretrained teacher checkpoint")

    p = sub.add_parser("distill-prune", help="Stage 1 distill-prune, surgeon, Stage 2 refinement")
    _common(p)
    p.add_argument("--teacher", metavar="CKPT", help="pretrained teacher checkpoint (pretrained inline if omitted)")

    p = sub.add_parser("joint-prune", help="joint pruning and RNN-T fine-tuning with encoder-output KD")
    _common(p)
    p.add_argument("--teacher", metavar="CKPT", help="pretrained teacher checkpoint (pretrained inline if omitted)")
    p.add_argument("--ptft", metavar="CKPT", help="fine-tuned teacher for pipeline.teacher_mode=ptft_encoder "
                                                   "(fine-tuned inline if omitted)")

    p = sub.add_parser("evaluate", help="greedy-decode both encoder taps and report token error rates")
    _common(p)
    p.add_argument("checkpoint", metavar="CKPT", help="transducer checkpoint")
    p.add_argument("--split", default="dev", help="corpus split to decode (default: dev)")

    p = sub.add_parser("report", help="merge run reports into a Table-3 style CSV")
    _common(p, data=False)
    p.add_argument("runs", nargs="+", metavar="RUN_DIR", help="artifact directories of pipeline runs")

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    _common(p, data=False)
    return parser


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("KDPRUNE_OUTPUT_ROOT", "runs")) / args.verb


def _dispatch(args, argv) -> int:
    from .pipeline import runs

    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    cfg = config_mod.load(args.config, args.overrides)
    for attr in ("teacher", "ptft", "checkpoint", "data"):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"--{attr} path {path} does not exist" if attr != "checkpoint"
                                    else f"checkpoint {path} does not exist")
    out = _out_dir(args)
    common = {"force": args.force, "argv": argv}
    data = getattr(args, "data", None)
    if args.verb == "gen-data":
        res = runs.run_gen_data(cfg, out, **common)
    elif args.verb == "pretrain-teacher":
        res = runs.run_pretrain(cfg, out, data, **common)
    elif args.verb == "finetune-teacher":
        res = runs.run_finetune(cfg, out, args.teacher, data, **common)
    elif args.verb == "distill-prune":
        res = runs.run_distill_prune(cfg, out, args.teacher, data, **common)
    elif args.verb == "joint-prune":
        res = runs.run_joint(cfg, out, args.teacher, args.ptft, data, **common)
    elif args.verb == "evaluate":
        res = runs.run_evaluate(cfg, out, args.checkpoint, args.split, data, **common)
    elif args.verb == "report":
        res = runs.run_report(cfg, out, args.runs, **common)
        print(res["table3_csv"], end="")
        return 0
    else:
        res = runs.run_grad_check(cfg, out, **common)
        for line in res["checks"]:
            print(line)
        if not res["passed"]:
            raise _GradCheckFailed("one or more gradient checks failed")
        return 0
    print(json.dumps(_summary(res), sort_keys=True))
    return 0


class _GradCheckFailed(Exception):
    pass


def _summary(res: dict) -> dict:
    keep = ("splits", "ce_reduction", "achieved_sparsity", "expected_sparsity", "retained_pct", "ter",
            "untrained_ter", "mflops_before", "mflops_after", "reload_max_abs_diff", "steps")
    return {k: res[k] for k in keep if k in res}


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"kdprune: error[{category}]: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    from .pipeline.io import LoadError
    from .pipeline.loop import DivergenceError
    from .pipeline.surgeon import SurgeryError

    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args, argv)
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except UsageError as e:
        return _fail("usage", e, 2)
    except ConfigError as e:
        return _fail("config", e, 2)
    except (LoadError, CheckpointError, FileNotFoundError) as e:
        return _fail("load", e, 1)
    except FileExistsError as e:
        return _fail("output_exists", e, 1)
    except DivergenceError as e:
        return _fail("divergence", e, 1)
    except SurgeryError as e:
        return _fail("surgery", e, 1)
    except _GradCheckFailed as e:
        return _fail("gradcheck", e, 1)
    except Exception as e:  # noqa: BLE001
        return _fail("runtime", f"{type(e).__name__}: {e}", 1)


if __name__ == "__main__":
    sys.exit(main())
