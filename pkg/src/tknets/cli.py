"""Command-line entry point: ``tknets {generate,train,eval,sweep} --config PATH``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import domains as dm
from . import experiments as ex
from .episodic import DivergenceError
from .numcore import NonFiniteError
from .tknet import save_checkpoint

EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_NONFINITE = 2, 3, 4, 5
SYNTHETIC = ("evolcircle", "rplate", "rotated-idx")


def _finite(obj) -> bool:
    if isinstance(obj, float):
        return math.isfinite(obj)
    if isinstance(obj, dict):
        return all(_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_finite(v) for v in obj)
    return True


def _prepare(args) -> tuple[ex.ExperimentConfig, Path]:
    exp = ex.load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(exp.to_text())
    return exp, out


def cmd_generate(args) -> int:
    exp, out = _prepare(args)
    if exp.dataset["generator"] not in SYNTHETIC:
        raise ex.ConfigError(f"generate needs a synthetic dataset ({', '.join(SYNTHETIC)})")
    seq = ex.build_dataset(exp.dataset, exp.seed)
    path = dm.save_sequence(seq, out / "dataset")
    print(f"wrote {len(seq)} domains to {path.parent}")
    return 0


def cmd_train(args) -> int:
    exp, out = _prepare(args)
    sources, _ = ex.split_for(exp, ex.build_dataset(exp.dataset, exp.seed))
    params, log, meta = ex.train_method(exp.method, sources, exp.train)
    header = dict(params.header(), run=meta)
    save_checkpoint(out / "model.ckpt", header, params.tensors)
    with open(out / "train.jsonl", "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    (out / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    final = log[-1]["loss"] if log else float("nan")
    print(f"{exp.method}: {len(log)} steps, final loss {final:.6g}, checkpoint {out / 'model.ckpt'}")
    if log and not _finite([e["loss"] for e in log]):
        return EXIT_NONFINITE
    return 0


def cmd_eval(args) -> int:
    exp, out = _prepare(args)
    ckpt = args.checkpoint or exp.checkpoint
    if not ckpt:
        raise ex.ConfigError("no checkpoint: pass --checkpoint or set eval.checkpoint")
    params, meta = ex.load_model(ckpt)
    seq = ex.build_dataset(exp.dataset, exp.seed)
    sources, targets = ex.split_for(exp, seq)
    ex.check_compatible(meta, seq, len(sources))
    report = ex.report_for(params, sources, targets, exp.horizons, exp.diagnostics)
    report["checkpoint"] = str(ckpt)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "horizons.tsv").write_text(ex.horizon_table(report))
    print(ex.horizon_table(report), end="")
    return 0 if _finite(report) else EXIT_NONFINITE


def cmd_sweep(args) -> int:
    exp, out = _prepare(args)
    rows = ex.run_sweep(exp)
    table = ex.sweep_table(rows, exp.sweep["axis"])
    (out / "sweep.tsv").write_text(table)
    with open(out / "sweep_cells.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(table, end="")
    return 0 if _finite(rows) else EXIT_NONFINITE


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tknets", description="Temporal domain generalization experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="overrides eval.checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ex.SpecMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DivergenceError, NonFiniteError) as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ex.ConfigError, dm.DataFormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
