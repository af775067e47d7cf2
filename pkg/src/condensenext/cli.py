"""Command-line interface: analyze, train, eval, export-report.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, data as cifar, training
from .arch import ModelSpec, build, default_spec
from .errors import ConfigError, ContractError, DataError, ParameterError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="condensenext", description="CondenseNeXt / CondenseNet toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    a = sub.add_parser("analyze", help="count MACs and parameters")
    a.add_argument("--variant", choices=("baseline", "condensenext"), default="condensenext")
    a.add_argument("--config", type=Path, help="key = value architecture file")
    a.add_argument("--format", choices=("table", "json"), default="table")
    a.add_argument("--flop-convention", type=int, choices=(1, 2), default=1,
                   help="FLOPs per multiply-accumulate")
    a.add_argument("--include-pooling", action="store_true")
    a.add_argument("--masks", choices=analysis.MASK_MODES, default="final",
                   help="count learned group convs fully condensed or as initialised")
    a.add_argument("--per-layer", action="store_true")

    t = sub.add_parser("train", help="train on CIFAR-10 binary batches")
    t.add_argument("--data", type=Path, required=True, help="cifar-10-batches-bin directory")
    t.add_argument("--subset", type=_positive, help="stratified training subset size")
    t.add_argument("--val-subset", type=_positive, default=2000,
                   help="stratified slice of the test batch used for per-epoch validation")
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True, help="checkpoint file")
    t.add_argument("--report", type=Path, help="per-epoch report (default: <out>.report.txt)")
    t.add_argument("--variant", choices=("baseline", "condensenext"), default="condensenext")
    t.add_argument("--config", type=Path)
    t.add_argument("--batch-size", type=_positive, default=64)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--loss", choices=training.LOSSES, default="cb_focal")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--save-optimizer", action="store_true", help="store momentum buffers too")

    e = sub.add_parser("eval", help="Top-1 accuracy of a checkpoint on the test batch")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--subset", type=_positive)
    e.add_argument("--batch-size", type=_positive, default=200)

    x = sub.add_parser("export-report", help="summarise a training report as JSON")
    x.add_argument("--report", type=Path, required=True)
    x.add_argument("--out", type=Path, help="write here instead of stdout")
    return p


def _spec(args) -> ModelSpec:
    variant = "condensenet_baseline" if args.variant == "baseline" else "condensenext"
    if args.config is not None:
        return ModelSpec.from_text(args.config.read_text(), variant=variant)
    return default_spec(variant)


def _counterpart(spec: ModelSpec) -> ModelSpec:
    other = "condensenext" if spec.variant == "condensenet_baseline" else "condensenet_baseline"
    return replace(spec, variant=other, rule=None)


def cmd_analyze(args, out) -> int:
    spec = _spec(args)
    kw = dict(flop_convention=args.flop_convention, masks=args.masks,
              include_pooling=args.include_pooling)
    report = analysis.count_costs(build(spec), **kw)
    other = analysis.count_costs(build(_counterpart(spec)), **kw)
    base, prop = (report, other) if spec.variant == "condensenet_baseline" else (other, report)
    red = analysis.reduction(base, prop)
    if args.format == "json":
        doc = report.to_dict()
        doc["reduction_vs_baseline"] = red
        doc["baseline_totals"] = {"flops": base.total_flops, "params": base.total_params}
        doc["condensenext_totals"] = {"flops": prop.total_flops, "params": prop.total_params}
        out.write(json.dumps(doc, indent=2) + "\n")
    else:
        out.write(report.to_table(per_layer=args.per_layer) + "\n")
        out.write(f"reduction condensenext vs baseline: {red['flops_pct']:.2f}% FLOPs, "
                  f"{red['params_pct']:.2f}% params\n")
    return EXIT_OK


def cmd_train(args, out) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    spec = _spec(args)
    train_all, test = cifar.load_cifar_dir(args.data)
    train_set = train_all
    if args.subset is not None:
        train_set = train_all.take(cifar.subset(train_all, args.subset, args.seed))
    val_n = min(args.val_subset, len(test))
    val_set = test.take(cifar.subset(test, val_n, args.seed + 1)) if val_n < len(test) else test
    cfg = training.TrainConfig(epochs=args.epochs, base_lr=args.lr, batch_size=args.batch_size,
                               seed=args.seed, loss=args.loss, augment=not args.no_augment)
    graph = build(spec, seed=args.seed)
    params = [t for _, t in graph.parameters()]
    opt = training.NesterovSGD(params, cfg.momentum, cfg.weight_decay)
    report_path = args.report or args.out.with_name(args.out.name + ".report.txt")
    with open(report_path, "w") as fh:
        rep = training.train(graph, cfg, train_set, val_set, report_stream=fh, optimizer=opt)
    counts = tuple(int(c) for c in train_set.class_counts(spec.num_classes))
    meta = checkpoint.CheckpointMeta(
        class_counts=counts, epoch=args.epochs,
        extra={"seed": args.seed, "train_images": len(train_set)},
        velocity=opt.state_arrays() if args.save_optimizer else None,
    )
    size = checkpoint.write_checkpoint(args.out, graph, meta)
    last = rep.epochs[-1]
    out.write(f"trained {len(rep.epochs)} epochs on {len(train_set)} images: "
              f"val_acc={last.val_acc:.4f} train_loss={last.train_loss:.4f}\n")
    out.write(f"checkpoint {args.out} ({size} bytes), report {report_path}\n")
    return EXIT_OK


def cmd_eval(args, out) -> int:
    graph, meta = checkpoint.read_checkpoint(args.model)
    _, test = cifar.load_cifar_dir(args.data)
    if args.subset is not None and args.subset < len(test):
        test = test.take(cifar.subset(test, args.subset, 0))
    acc = training.evaluate(graph, test, args.batch_size, meta.mean, meta.std)
    out.write(f"top1={acc.top1:.4f} loss={acc.loss:.4f} images={acc.count}\n")
    return EXIT_OK


def _finite(v: float):
    return v if math.isfinite(v) else None


def summarize_report(records: list) -> dict:
    if not records:
        raise DataError("report holds no epochs")
    val = [r.val_acc for r in records]
    best = int(np.nanargmax(val)) if not all(math.isnan(v) for v in val) else None
    return {
        "epochs": len(records),
        "final": {"epoch": records[-1].epoch, "train_loss": records[-1].train_loss,
                  "train_acc": records[-1].train_acc, "val_loss": _finite(records[-1].val_loss),
                  "val_acc": _finite(records[-1].val_acc)},
        "best_val_acc": None if best is None else {"epoch": records[best].epoch, "val_acc": val[best]},
        "condense_triggers": [{"epoch": r.epoch, "stage": r.stage} for r in records if r.stage is not None],
        "series": {
            "lr": [r.lr for r in records],
            "train_loss": [r.train_loss for r in records],
            "train_acc": [r.train_acc for r in records],
            "val_loss": [_finite(r.val_loss) for r in records],
            "val_acc": [_finite(r.val_acc) for r in records],
        },
    }


def cmd_export(args, out) -> int:
    records = training.read_report(args.report.read_text())
    try:
        text = json.dumps(summarize_report(records), indent=2) + "\n"
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed report: {exc}") from exc
    if args.out is not None:
        args.out.write_text(text)
    else:
        out.write(text)
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "train": cmd_train, "eval": cmd_eval, "export-report": cmd_export}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required\n\n{parser.format_help()}")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=err)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (ConfigError, ParameterError, ContractError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        err.write(f"data error: {exc}\n")
        return EXIT_DATA


def run():  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":
    run()
