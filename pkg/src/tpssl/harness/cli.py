"""``tpssl`` command line.

Every subcommand writes its artifacts under ``--out`` and prints a delimited
(CSV) summary on stdout. Failures exit nonzero with one line on stderr of the
form ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from ..contrastive import DegenerateInputError, NoCorrespondenceError, StructuralError
from ..errors import ConfigurationError
from ..ssl import DataError
from . import experiments as ex
from .checkpoint import CorruptionError, MissingCheckpointError
from .config import ExperimentConfig, load_config
from .plotting import KINDS, SchemaError, cmd_plot

# (exception type, category, exit code); first match wins, so subclasses go first.
ERROR_CATEGORIES = (
    (SchemaError, "schema", 7),
    (ConfigurationError, "config", 2),
    (DataError, "data", 3),
    (DegenerateInputError, "data", 3),
    (NoCorrespondenceError, "data", 3),
    (StructuralError, "checkpoint", 4),
    (CorruptionError, "corruption", 5),
    (MissingCheckpointError, "checkpoint", 4),
    (OSError, "io", 6),
    (ValueError, "invalid", 8),
)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", type=Path, help="experiment config (INI key/value text)", **d)
    parser.add_argument("--seed", type=int, help="run a single seed instead of run.seeds", **d)
    parser.add_argument("--out", type=Path, help="output directory (default run.out)", **d)
    parser.add_argument("--threads", type=int, help="torch threads; 1 is bit-reproducible", **d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpssl", description="Target pretraining for semi-supervised learning.")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("gen-data", "render the target and generic datasets to .npz")
    s = add("split", "write the labeled split as JSON")
    s.add_argument("--data", type=Path)
    s = add("pretrain", "generic pretraining on the broad distribution")
    s.add_argument("--data", type=Path)
    s = add("target-pretrain", "contrastive pretraining on the target images")
    s.add_argument("--init", default="random", help="'random' or a checkpoint directory")
    s.add_argument("--data", type=Path)
    s.add_argument("--snapshots", type=_int_list, default=(), help="epochs to snapshot, e.g. 0,5,10")
    s = add("finetune", "semi-supervised finetuning")
    s.add_argument("--init", default="random")
    s.add_argument("--data", type=Path)
    s.add_argument("--split", type=Path, help="split.json written by 'split'")
    s = add("eval", "evaluate a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--metrics", type=_str_list, default=None,
                   help=f"comma list from {','.join(ex.EVAL_METRICS)} (default eval.metrics)")
    s.add_argument("--data", type=Path)
    s = add("transfer", "cross-dataset transfer matrix")
    s.add_argument("--init", default="random")
    s = add("sweep", "accuracy versus target-pretraining epochs")
    s.add_argument("--init", default="random")
    s = add("ablate", "dense pretraining ablation (anchor, affine)")
    s.add_argument("--init", default="random")
    s = add("plot", "merge metric files and render curves")
    s.add_argument("files", nargs="+", type=Path)
    s.add_argument("--kind", choices=KINDS, default="convergence")
    s.add_argument("--labels", type=_str_list, default=None)
    return p


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _emit(header, rows, stream=None) -> None:
    w = csv.writer(stream or sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _emit_stage(res: ex.StageResult) -> None:
    _emit(["key", "value"], [["checkpoint", res.path], ["run_id", res.manifest.run_id],
                             ["stage", res.manifest.stage], ["parent", res.manifest.parent or ""]]
          + [[k, repr(v)] for k, v in sorted(res.final.items())])


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    seeds = (args.seed,) if getattr(args, "seed", None) is not None else cfg.run.seeds
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.run.out)
    threads = args.threads if getattr(args, "threads", None) is not None else cfg.run.threads
    ex.set_threads(threads)
    cfg = replace(cfg, run=replace(cfg.run, seeds=tuple(seeds), out=str(out), threads=threads))
    seed = seeds[0]
    cmd = args.command
    if cmd == "gen-data":
        paths = ex.cmd_gen_data(cfg, out)
        _emit(["dataset", "path"], [[k, v] for k, v in paths.items()])
    elif cmd == "split":
        _emit(["key", "value"], [["split", ex.cmd_split(cfg, seed, out, args.data)]])
    elif cmd == "pretrain":
        _emit_stage(ex.cmd_pretrain(cfg, seed, out, args.data))
    elif cmd == "target-pretrain":
        _emit_stage(ex.cmd_target_pretrain(cfg, seed, out, args.init, args.data, args.snapshots))
    elif cmd == "finetune":
        _emit_stage(ex.cmd_finetune(cfg, seed, out, args.init, args.data, args.split))
    elif cmd == "eval":
        metrics = cfg.eval.metrics if args.metrics is None else args.metrics
        report = ex.cmd_eval(args.checkpoint, cfg, metrics, out, seed, args.data)
        _emit(["metric", "value"], [[k, repr(v)] for k, v in sorted(report.items())])
    elif cmd == "transfer":
        m = ex.cmd_transfer_matrix(cfg, seeds, out, args.init)
        cols = list(m)
        _emit(["pretrain_source"] + cols, [[s] + [repr(m[s][t]) for t in cols] for s in cols])
    elif cmd == "sweep":
        rows = ex.cmd_steps_sweep(cfg, seeds, out, args.init)
        _emit(["epoch", "n_labeled", "accuracy"], [[r["epoch"], r["n_labeled"], repr(r["accuracy"])] for r in rows])
    elif cmd == "ablate":
        rows = ex.cmd_ablation(cfg, seeds, out, args.init)
        _emit(["variant", "anchor_weight", "affine", "miou"],
              [[r["variant"], r["anchor_weight"], r["affine"], repr(r["miou"])] for r in rows])
    elif cmd == "plot":
        data, image = cmd_plot(args.files, args.kind, out, args.labels)
        _emit(["artifact", "path"], [["data", data], ["image", image]])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except Exception as exc:  # categorized below; anything else is a bug
        for kind, category, code in ERROR_CATEGORIES:
            if isinstance(exc, kind):
                print(f"error[{category}]: {exc}", file=sys.stderr)
                return code
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
