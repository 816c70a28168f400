"""Command-line entry point: ``stitchkit <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import runner
from .config import ExperimentConfig, resolve_out
from .controller import ConfigError
from .deploy import pareto_frontier, rows_to_csv

log = logging.getLogger("stitchkit")

SUBCOMMANDS = ("enumerate", "pretrain", "train", "select", "eval", "angles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stitchkit", description="Stitchable task adaptation at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name, help_ in [
        ("enumerate", "print the stitch palette as JSON"),
        ("pretrain", "pretrain the anchor family on the source task"),
        ("train", "adapt and stitch the anchors on the target task"),
        ("select", "pick one stitch per FLOPs interval from the tracker"),
        ("eval", "evaluate every stitch on the target eval split"),
        ("angles", "pairwise gradient angles between stitches"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="run directory (overrides STITCHKIT_OUT and out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--pipeline", choices=["one-stage", "adapt-then-stitch"])
        if name == "eval":
            p.add_argument("--jobs", type=int, default=1)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "pipeline", None):
        cfg.pipeline = args.pipeline
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = resolve_out(cfg, args.out)
    try:
        return COMMANDS[args.command](cfg, out, args)
    except (runner.RunError, OSError, FloatingPointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_enumerate(cfg, out, args):
    rows = runner.palette_rows(cfg)
    text = json.dumps(rows, indent=1)
    print(text)
    if args.out or args.config:
        out.mkdir(parents=True, exist_ok=True)
        (out / "palette.json").write_text(text)
    return 0


def cmd_pretrain(cfg, out, args):
    report = runner.pretrain(cfg, out)
    print(json.dumps(report, indent=1))
    return 0


def cmd_train(cfg, out, args):
    state, epochs = runner.train(cfg, out)
    last = epochs[-1] if epochs else {}
    print(json.dumps({"iterations": state.iter, "epochs": len(epochs),
                      "final_loss": last.get("loss"), "teacher_acc": last.get("teacher_acc")}))
    return 0


def cmd_select(cfg, out, args):
    dep = runner.select(out)
    print(json.dumps([d.__dict__ for d in dep], indent=1))
    return 0


def cmd_eval(cfg, out, args):
    rows = runner.evaluate(cfg, out, args.jobs)
    text = rows_to_csv(rows)
    (out / "eval.csv").write_text(text)
    (out / "pareto.json").write_text(json.dumps(pareto_frontier(rows)))
    sys.stdout.write(text)
    return 0


def cmd_angles(cfg, out, args):
    res = runner.angles(cfg, out)
    ids = res["stitch_ids"]
    with open(out / "angles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "stitch_i", "stitch_j", "angle_deg"])
        for domain in ("source", "target"):
            mat = res[domain]["matrix"]
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    w.writerow([domain, ids[i], ids[j], "" if np.isnan(mat[i, j]) else repr(float(mat[i, j]))])
    with open(out / "angles_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "source", "target"])
        edges = res["source"]["edges"]
        for k in range(len(edges) - 1):
            w.writerow([edges[k], edges[k + 1], int(res["source"]["counts"][k]), int(res["target"]["counts"][k])])
    report = {"target_block": list(res["block"]), "stitches": ids,
              "median_source": res["source"]["median"], "median_target": res["target"]["median"]}
    (out / "angles_report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return 0


COMMANDS = {"enumerate": cmd_enumerate, "pretrain": cmd_pretrain, "train": cmd_train,
            "select": cmd_select, "eval": cmd_eval, "angles": cmd_angles}


if __name__ == "__main__":
    sys.exit(main())
