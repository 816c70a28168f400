"""Run-directory orchestration shared by the CLI and the estimator."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import tensor as T
from .anchors import build_family, evaluate_anchor, pretrain_anchor
from .config import ExperimentConfig
from .controller import (ImportanceTracker, make_state, prepare, run_adapt_then_stitch,
                         run_adaptation)
from .data import source_and_target
from .deploy import angle_histogram, evaluate_palette, select_deployment
from .pst import init_pst, pairwise_gradient_angles
from .stitching import build_palette, cost_of
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_FIELDS = ["iter", "stitch_id", "loss", "snip_score", "q_after", "lr"]


class RunError(RuntimeError):
    """A run-directory artifact is missing or inconsistent."""


def make_data(cfg: ExperimentConfig):
    src, tgt = source_and_target(cfg.num_classes, cfg.seq_len, cfg.sharpness, cfg.seed)
    return src.split(cfg.train_samples, cfg.eval_samples, cfg.seed) + tgt.split(
        cfg.train_samples, cfg.eval_samples, cfg.seed)


def palette_rows(cfg: ExperimentConfig) -> list[dict]:
    configs = cfg.anchor_configs()
    palette = build_palette(configs_as_family(configs), cfg.kernel, cfg.stride)
    rows = []
    for s in palette.stitches:
        c = cost_of(s, configs, cfg.ranks, cfg.num_classes)
        rows.append({"id": s.id, "pair": [s.small_anchor, s.large_anchor], "l": s.l, "m": s.m,
                     "is_anchor": s.is_anchor, "flops": c.flops, "params_total": c.params_total,
                     "params_trainable": c.params_trainable})
    return rows


class _ConfigOnly:
    """Anchor stand-in carrying only a config, enough for enumeration and costing."""

    def __init__(self, config):
        self.config = config


def configs_as_family(configs):
    return [_ConfigOnly(c) for c in configs]


# -- checkpoints -----------------------------------------------------------------------------

def save_family(family, run_dir: Path):
    for a in family:
        T.save_tensors(run_dir / "anchors" / f"anchor{a.index}", a.state_dict(),
                       extra={"config": a.config.to_dict(), "name": a.name})


def load_family(cfg: ExperimentConfig, run_dir: Path):
    family = build_family(cfg.anchor_configs(), cfg.seed)
    for a in family:
        path = run_dir / "anchors" / f"anchor{a.index}.json"
        if not path.exists():
            raise RunError(f"anchors not found in {run_dir}; run `pretrain` first")
        state, _ = T.load_tensors(path.with_suffix(""))
        a.load_state_dict(state).freeze()
    return family


def save_adapted(palette, overlay, run_dir: Path):
    T.save_tensors(run_dir / "overlay", overlay.state_dict(),
                   roles={k: role for k, (_, role) in overlay.tensors().items()})
    T.save_tensors(run_dir / "stitching_layers",
                   {f"stitch.{i}.M": layer.M.data for i, layer in enumerate(palette.layers)},
                   roles={f"stitch.{i}.M": "stitch" for i in range(len(palette.layers))})
    if any(a.name.endswith("-merged") for a in palette.family):
        for a in palette.family:
            T.save_tensors(run_dir / "adapted_anchors" / f"anchor{a.index}", a.state_dict())


def load_adapted(cfg: ExperimentConfig, run_dir: Path):
    if not (run_dir / "overlay.json").exists():
        raise RunError(f"overlay not found in {run_dir}; run `train` first")
    family = load_family(cfg, run_dir)
    if (run_dir / "adapted_anchors").exists():
        for a in family:
            state, _ = T.load_tensors(run_dir / "adapted_anchors" / f"anchor{a.index}")
            a.load_state_dict(state)
    palette = build_palette(family, cfg.kernel, cfg.stride)
    layers, _ = T.load_tensors(run_dir / "stitching_layers")
    for i, layer in enumerate(palette.layers):
        layer.M = Tensor(layers[f"stitch.{i}.M"])
    overlay = init_pst(palette, cfg.ranks, cfg.num_classes, seed=cfg.seed)
    state, _ = T.load_tensors(run_dir / "overlay")
    overlay.load_state_dict(state)
    return palette, overlay


def load_tracker(run_dir: Path) -> ImportanceTracker:
    path = run_dir / "tracker.json"
    if not path.exists():
        raise RunError(f"tracker not found in {run_dir}; run `train` first")
    return ImportanceTracker.from_dict(json.loads(path.read_text()))


# -- stages ----------------------------------------------------------------------------------

def pretrain(cfg: ExperimentConfig, run_dir: Path) -> dict:
    src_train, src_eval, _, tgt_eval = make_data(cfg)
    family = build_family(cfg.anchor_configs(), cfg.seed)
    report = {}
    for a in family:
        pretrain_anchor(a, src_train, cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                        batch_size=cfg.batch_size, weight_decay=cfg.weight_decay, seed=cfg.seed)
        report[a.name] = {"source_acc": evaluate_anchor(a, src_eval),
                          "target_acc_source_head": evaluate_anchor(a, tgt_eval)}
        log.info("pretrained %s: %s", a.name, report[a.name])
    run_dir.mkdir(parents=True, exist_ok=True)
    save_family(family, run_dir)
    (run_dir / "config.cfg").write_text(cfg.dumps())
    (run_dir / "pretrain.json").write_text(json.dumps(report, indent=1))
    return report


def train(cfg: ExperimentConfig, run_dir: Path, family=None):
    """Adapt the pretrained family on the target task and persist everything."""
    family = family if family is not None else load_family(cfg, run_dir)
    _, _, tgt_train, _ = make_data(cfg)
    acfg = cfg.adapt_config()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.dumps())
    snaps = run_dir / "tracker_snapshots"
    snaps.mkdir(exist_ok=True)

    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)

        def on_step(r):
            writer.writerow([r.iter, r.stitch_id, repr(r.loss), repr(r.snip), repr(r.q_after), repr(r.lr)])

        def on_epoch(row):
            (snaps / f"epoch{row['epoch']:04d}.json").write_text(json.dumps(row["tracker"]))

        if cfg.pipeline == "one-stage":
            palette, overlay = prepare(family, tgt_train, cfg.kernel, cfg.stride, cfg.ranks,
                                       cfg.num_classes, cfg.calib_batches, cfg.batch_size, cfg.seed)
            state = make_state(palette, overlay, acfg, len(tgt_train))
            state, epochs = run_adaptation(state, tgt_train, acfg, on_step, on_epoch)
        else:
            state, epochs = run_adapt_then_stitch(family, tgt_train, acfg, cfg.kernel, cfg.stride,
                                                  cfg.ranks, cfg.num_classes, cfg.calib_batches,
                                                  on_step, on_epoch)

    (run_dir / "tracker.json").write_text(json.dumps(state.tracker.to_dict()))
    (run_dir / "epochs.json").write_text(json.dumps([{k: v for k, v in r.items() if k != "tracker"}
                                                     for r in epochs], indent=1))
    save_adapted(state.palette, state.overlay, run_dir)
    return state, epochs


def select(run_dir: Path):
    dep = select_deployment(load_tracker(run_dir))
    (run_dir / "deployment.json").write_text(json.dumps([d.__dict__ for d in dep], indent=1))
    return dep


def evaluate(cfg: ExperimentConfig, run_dir: Path, n_jobs: int = 1):
    palette, overlay = load_adapted(cfg, run_dir)
    _, _, _, tgt_eval = make_data(cfg)
    return evaluate_palette(palette, overlay, tgt_eval, n_jobs)


def angles(cfg: ExperimentConfig, run_dir: Path, n_samples: int = 256):
    """Pairwise gradient angles on the largest anchor's last block, source vs target data."""
    if (run_dir / "overlay.json").exists():
        palette, overlay = load_adapted(cfg, run_dir)
    else:
        family = load_family(cfg, run_dir)
        _, _, tgt_train, _ = make_data(cfg)
        palette, overlay = prepare(family, tgt_train, cfg.kernel, cfg.stride, cfg.ranks, cfg.num_classes,
                                   cfg.calib_batches, cfg.batch_size, cfg.seed)
    src_train, _, tgt_train, _ = make_data(cfg)
    top = len(palette.family) - 1
    target = (top, palette.family[top].config.depth)
    stitches = [s for s in palette.stitches if s.large_anchor == top]
    out = {}
    for domain, data in (("source", src_train), ("target", tgt_train)):
        mat = pairwise_gradient_angles(stitches, palette, overlay, data[:n_samples], target)
        counts, edges = angle_histogram(mat)
        iu = np.triu_indices_from(mat, k=1)
        vals = mat[iu][np.isfinite(mat[iu])]
        out[domain] = {"matrix": mat, "counts": counts, "edges": edges,
                       "median": float(np.median(vals)) if vals.size else float("nan")}
    out["stitch_ids"] = [s.id for s in stitches]
    out["block"] = target
    return out
