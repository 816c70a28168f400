"""Score-based deployment, full-palette evaluation and Pareto analysis."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .controller import ImportanceTracker
from .data import Batch
from .stitching import Palette, cost_of, stitch_forward

ANGLE_BINS = 36


@dataclass
class Deployment:
    interval: int
    stitch_id: int
    score: float
    flops: int
    accuracy: float | None = None


@dataclass
class EvalRow:
    stitch_id: int
    flops: int
    params_trainable: int
    accuracy: float


def select_deployment(tracker: ImportanceTracker) -> list[Deployment]:
    """Highest accumulated score per interval; ties go to the cheaper stitch."""
    if tracker is None or not tracker.members:
        raise ValueError("tracker is empty")
    out = []
    for k, members in enumerate(tracker.members):
        best = min(members, key=lambda n: (-tracker.scores[n], tracker.flops[n], n))
        out.append(Deployment(k, int(best), float(tracker.scores[best]), int(tracker.flops[best])))
    return out


def evaluate_stitch(defn, palette: Palette, overlay, data: Batch, batch_size=256) -> float:
    view = overlay.view(defn.id) if overlay is not None else None
    correct = 0
    for b in data.batches(batch_size):
        logits = stitch_forward(defn, palette.family, palette.layers, view, b)
        correct += int((logits.data.argmax(axis=1) == b.labels).sum())
    return correct / len(data)


def evaluate_palette(palette: Palette, overlay, data: Batch, n_jobs: int = 1) -> list[EvalRow]:
    """Accuracy of every stitch on ``data``; rows follow palette order."""
    ranks = getattr(overlay, "ranks", None) or None
    num_classes = getattr(overlay, "num_classes", None) or None

    def one(defn):
        acc = evaluate_stitch(defn, palette, overlay, data)
        cost = cost_of(defn, palette.family, ranks, num_classes)
        return EvalRow(defn.id, cost.flops, cost.params_trainable, acc)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(one, palette.stitches))
    return [one(s) for s in palette.stitches]


def pareto_frontier(rows) -> list[int]:
    """Stitch ids not dominated in (lower FLOPs, higher accuracy), by ascending FLOPs."""
    ordered = sorted(rows, key=lambda r: (r.flops, -r.accuracy, r.stitch_id))
    out, best = [], -np.inf
    for r in ordered:
        if r.accuracy > best:
            out.append(r.stitch_id)
            best = r.accuracy
    return out


def angle_histogram(angles: np.ndarray, bins: int = ANGLE_BINS):
    """Counts of the upper-triangle angles over [0, 180] degrees."""
    iu = np.triu_indices_from(angles, k=1)
    vals = angles[iu]
    vals = vals[np.isfinite(vals)]
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 180.0))
    return counts, edges


# -- serialization --------------------------------------------------------------------------

def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    rows = list(rows)
    fields = list(asdict(rows[0]).keys()) if rows else ["stitch_id", "flops", "params_trainable", "accuracy"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
    return buf.getvalue()


def eval_table_from_csv(text: str) -> list[EvalRow]:
    return [EvalRow(int(r["stitch_id"]), int(r["flops"]), int(r["params_trainable"]), float(r["accuracy"]))
            for r in csv.DictReader(io.StringIO(text))]


def deployment_to_json(dep: list[Deployment]) -> list[dict]:
    return [asdict(d) for d in dep]


def deployment_from_json(rows) -> list[Deployment]:
    return [Deployment(**r) for r in rows]
