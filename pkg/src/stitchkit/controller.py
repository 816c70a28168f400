"""One-stage adaptation loop: SNIP importance, moving-average scores, interval sampling,
inplace hard-label distillation from the largest anchor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch
from .optim import AdamW, cosine_lr, scaled_lr
from .pst import PSTOverlay, init_pst, merge_anchor, trainable_set
from .stitching import Palette, StitchDefinition, build_palette, init_stitching_layers, stitch_forward


class ConfigError(ValueError):
    """Invalid experiment or controller configuration."""


# -- importance tracking --------------------------------------------------------------------

def make_intervals(flops, n_intervals: int):
    """Equal-width FLOPs bins over [min, max]; empty bins merge into their right neighbour.

    Returns ``(bounds, members)`` where members are stitch indices sorted by FLOPs.
    """
    flops = np.asarray(flops, dtype=np.float64)
    if n_intervals < 1:
        raise ConfigError("need at least one interval")
    lo, hi = flops.min(), flops.max()
    edges = np.linspace(lo, hi, n_intervals + 1)
    if hi > lo:
        idx = np.minimum(((flops - lo) / (hi - lo) * n_intervals).astype(int), n_intervals - 1)
    else:
        idx = np.zeros(len(flops), dtype=int)
    bins = [[(edges[k], edges[k + 1]), [int(i) for i in np.flatnonzero(idx == k)]] for k in range(n_intervals)]
    merged, pending = [], None
    for bounds, members in bins:
        if pending is not None:
            bounds = (pending, bounds[1])
        if not members:
            pending = bounds[0]
            continue
        pending = None
        merged.append([bounds, members])
    if pending is not None:
        # trailing empty bins widen the last occupied one
        merged[-1][0] = (merged[-1][0][0], hi)
    order = np.lexsort((np.arange(len(flops)), flops))
    rank = {int(i): r for r, i in enumerate(order)}
    return ([tuple(map(float, b)) for b, _ in merged],
            [sorted(m, key=rank.__getitem__) for _, m in merged])


@dataclass
class ImportanceTracker:
    flops: np.ndarray
    eta: float = 0.9
    n_intervals: int = 15
    warmup_iters: int = 0
    normalize: bool = True
    scores: np.ndarray = None
    iter: int = 0
    intervals: list = field(default_factory=list)
    members: list = field(default_factory=list)

    def __post_init__(self):
        self.flops = np.asarray(self.flops, dtype=np.int64)
        if not 0 <= self.eta < 1:
            raise ConfigError(f"eta must lie in [0, 1), got {self.eta}")
        if self.scores is None:
            self.scores = np.zeros(len(self.flops))
        if not self.members:
            self.intervals, self.members = make_intervals(self.flops, self.n_intervals)

    @property
    def warming_up(self) -> bool:
        return self.iter < self.warmup_iters

    def interval_of(self, n: int) -> int:
        return next(k for k, m in enumerate(self.members) if n in m)

    def update(self, n: int, Q: float):
        self.scores[n] = update_score(self.scores[n], Q, self.eta)
        return self

    def interval_probs(self, k: int) -> np.ndarray:
        """Categorical distribution over ``members[k]``."""
        q = self.scores[self.members[k]]
        if self.normalize:
            sd = q.std()
            q = (q - q.mean()) / sd if sd > 0 else np.zeros_like(q)
        z = np.exp(q - q.max())
        return z / z.sum()

    def probabilities(self) -> np.ndarray:
        """Exact sampling law over all stitches at the current iteration."""
        p = np.zeros(len(self.flops))
        if self.warming_up:
            p[:] = 1.0 / len(p)
            return p
        for k, members in enumerate(self.members):
            p[members] += self.interval_probs(k) / len(self.members)
        return p

    def to_dict(self):
        return {"eta": self.eta, "n_intervals": self.n_intervals, "warmup_iters": self.warmup_iters,
                "normalize": self.normalize, "iter": self.iter, "flops": self.flops.tolist(),
                "scores": self.scores.tolist(), "intervals": [list(b) for b in self.intervals],
                "members": self.members}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["flops"]), d["eta"], d["n_intervals"], d["warmup_iters"], d["normalize"],
                   np.array(d["scores"], dtype=np.float64), d["iter"],
                   [tuple(b) for b in d["intervals"]], [list(m) for m in d["members"]])


def update_score(q_prev: float, Q: float, eta: float) -> float:
    return eta * q_prev + (1.0 - eta) * Q


def sample_stitch(tracker: ImportanceTracker, rng: np.random.Generator) -> int:
    """Index of the next stitch to train."""
    if tracker.warming_up:
        return int(rng.integers(len(tracker.flops)))
    k = int(rng.integers(len(tracker.members)))
    members = tracker.members[k]
    return int(members[rng.choice(len(members), p=tracker.interval_probs(k))])


# -- scoring --------------------------------------------------------------------------

def _saliency(params: dict, grads: dict) -> float:
    total = sum(float(np.abs(p.data * grads[k]).sum()) for k, p in params.items())
    return total / sum(p.size for p in params.values())


def _snapshot_grads(params: dict, scale: float = 1.0) -> dict:
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad * scale) for k, p in params.items()}


def snip_score(defn: StitchDefinition, palette: Palette, overlay: PSTOverlay, batch: Batch) -> float:
    """Mean of ``|theta * dCE/dtheta|`` over the stitch's trainable tensors."""
    if len(batch) == 0:
        raise ValueError("SNIP needs a nonempty batch")
    params = trainable_set(defn, overlay, palette)
    AdamW.zero_grad(params.values())
    logits = stitch_forward(defn, palette.family, palette.layers, overlay.view(defn.id), batch)
    T.backward(T.cross_entropy(logits, batch.labels))
    grads = _snapshot_grads(params)
    AdamW.zero_grad(overlay_leaves(overlay))
    _check_finite(grads, defn.id)
    return _saliency(params, grads)


def overlay_leaves(overlay: PSTOverlay):
    return [t for t, _ in overlay.tensors().values()]


def _check_finite(grads, sid):
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {k} for stitch {sid}")


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainState:
    palette: Palette
    overlay: PSTOverlay
    tracker: ImportanceTracker
    optimizer: AdamW
    rng: np.random.Generator
    peak_lr: float
    total_iters: int
    lr_warmup_iters: int
    iter: int = 0
    epoch: int = 0
    events: list = field(default_factory=list)  # (iter, stitch id) per optimizer step, if recording
    record_events: bool = False

    def lr(self) -> float:
        return cosine_lr(self.peak_lr, self.iter, self.total_iters, self.lr_warmup_iters)


@dataclass
class StepResult:
    iter: int
    stitch_id: int
    loss: float
    snip: float
    q_after: float
    lr: float
    teacher_loss: float
    teacher_correct: int


def _step(state: TrainState, params: dict, lr: float, sid: int):
    state.optimizer.step(params.values(), lr=lr)
    if state.record_events:
        state.events.append((state.iter, sid))


def train_step(state: TrainState, batch: Batch) -> StepResult:
    palette, overlay = state.palette, state.overlay
    teacher = palette.teacher
    lr = state.lr()
    leaves = overlay_leaves(overlay)

    # (1) largest anchor on plain cross-entropy
    AdamW.zero_grad(leaves)
    t_params = trainable_set(teacher, overlay, palette)
    t_logits = stitch_forward(teacher, palette.family, palette.layers, overlay.view(teacher.id), batch)
    t_loss = T.cross_entropy(t_logits, batch.labels)
    if not np.isfinite(t_loss.data):
        raise FloatingPointError(f"non-finite loss for teacher stitch {teacher.id}")
    T.backward(t_loss)
    t_grads = _snapshot_grads(t_params)
    _check_finite(t_grads, teacher.id)
    t_snip = _saliency(t_params, t_grads)
    _step(state, t_params, lr, teacher.id)
    pseudo = t_logits.data.argmax(axis=1)
    t_correct = int((pseudo == batch.labels).sum())

    # (2) sample a stitch
    sid = sample_stitch(state.tracker, state.rng)
    if sid == teacher.id:
        # the teacher's own step already covered this iteration
        loss, Q = float(t_loss.data), t_snip
    else:
        defn = palette.stitches[sid]
        params = trainable_set(defn, overlay, palette)
        AdamW.zero_grad(leaves)
        logits = stitch_forward(defn, palette.family, palette.layers, overlay.view(sid), batch)
        ce = T.cross_entropy(logits, batch.labels)
        distill = T.cross_entropy(logits, pseudo)
        loss = 0.5 * float(ce.data) + 0.5 * float(distill.data)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss for stitch {sid}")
        T.backward(ce, 0.5)
        ce_grads = _snapshot_grads(params, 2.0)
        _check_finite(ce_grads, sid)
        Q = _saliency(params, ce_grads)
        T.backward(distill, 0.5)
        _step(state, params, lr, sid)

    state.tracker.update(sid, Q)
    state.tracker.iter += 1
    res = StepResult(state.iter, sid, loss, Q, float(state.tracker.scores[sid]), lr,
                     float(t_loss.data), t_correct)
    state.iter += 1
    return res


@dataclass
class AdaptConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 2e-3
    weight_decay: float = 1e-4
    lr_warmup_epochs: int = 10
    eta: float = 0.9
    n_intervals: int = 15
    warmup_frac: float = 0.2
    normalize_scores: bool = True
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.eta < 1:
            raise ConfigError("eta must lie in [0, 1)")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.n_intervals < 1:
            raise ConfigError("n_intervals must be >= 1")
        return self


def make_state(palette: Palette, overlay: PSTOverlay, cfg: AdaptConfig, n_train: int) -> TrainState:
    cfg.validate()
    steps = math.ceil(n_train / cfg.batch_size) if n_train else 0
    total = cfg.epochs * steps
    tracker = ImportanceTracker(palette.flops(), cfg.eta, cfg.n_intervals,
                                warmup_iters=int(round(cfg.warmup_frac * total)),
                                normalize=cfg.normalize_scores)
    return TrainState(palette, overlay, tracker, AdamW(weight_decay=cfg.weight_decay),
                      np.random.default_rng([cfg.seed, 11]),
                      scaled_lr(cfg.base_lr, cfg.batch_size), total,
                      min(total, cfg.lr_warmup_epochs * steps))


def run_adaptation(state: TrainState, train: Batch, cfg: AdaptConfig, on_step=None, on_epoch=None):
    """Run every epoch of :func:`train_step`; returns ``(state, per-epoch metrics)``."""
    shuffle = np.random.default_rng([cfg.seed, 13])
    log = []
    for epoch in range(cfg.epochs):
        losses, correct, seen = [], 0, 0
        for b in train.batches(cfg.batch_size, shuffle):
            res = train_step(state, b)
            losses.append(res.loss)
            correct += res.teacher_correct
            seen += len(b)
            if on_step is not None:
                on_step(res)
        state.epoch = epoch + 1
        row = {"epoch": state.epoch, "loss": float(np.mean(losses)),
               "teacher_acc": correct / seen, "tracker": state.tracker.to_dict()}
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return state, log


def calibration_batches(data: Batch, n_batches: int, batch_size: int):
    return [data[i * batch_size:(i + 1) * batch_size] for i in range(n_batches) if i * batch_size < len(data)]


def prepare(family, train: Batch, kernel=2, stride=1, ranks=None, num_classes=None,
            calib_batches=8, batch_size=64, seed=0):
    """Palette with least-squares stitching layers plus a fresh PST overlay."""
    palette = build_palette(family, kernel, stride)
    init_stitching_layers(palette, calibration_batches(train, calib_batches, batch_size))
    overlay = init_pst(palette, ranks, num_classes, seed=seed)
    return palette, overlay


def adapt_anchor(anchor_idx: int, palette: Palette, overlay: PSTOverlay, train: Batch,
                 cfg: AdaptConfig, epochs: int):
    """Plain-CE PST on one anchor's own stitch (stage one of adapt-then-stitch)."""
    defn = next(s for s in palette.stitches if s.is_anchor and s.small_anchor == anchor_idx)
    params = trainable_set(defn, overlay, palette)
    opt = AdamW(weight_decay=cfg.weight_decay)
    steps = math.ceil(len(train) / cfg.batch_size)
    total = epochs * steps
    peak = scaled_lr(cfg.base_lr, cfg.batch_size)
    shuffle = np.random.default_rng([cfg.seed, 17, anchor_idx])
    it = 0
    for _ in range(epochs):
        for b in train.batches(cfg.batch_size, shuffle):
            AdamW.zero_grad(overlay_leaves(overlay))
            logits = stitch_forward(defn, palette.family, palette.layers, overlay.view(defn.id), b)
            T.backward(T.cross_entropy(logits, b.labels))
            opt.step(params.values(), lr=cosine_lr(peak, it, total, min(total, cfg.lr_warmup_epochs * steps)))
            it += 1
    return defn


def run_adapt_then_stitch(family, train: Batch, cfg: AdaptConfig, kernel=2, stride=1, ranks=None,
                          num_classes=None, calib_batches=8, on_step=None, on_epoch=None):
    """Baseline: adapt each anchor alone, merge, then stitch and fine-tune the palette.

    ``cfg.epochs`` is the total budget: each anchor and the stitching stage get an equal share.
    """
    share = cfg.epochs // (len(family) + 1)
    palette, overlay = prepare(family, train, kernel, stride, ranks, num_classes,
                               calib_batches, cfg.batch_size, cfg.seed)
    adapted = []
    for a in range(len(family)):
        defn = adapt_anchor(a, palette, overlay, train, cfg, share)
        adapted.append(merge_anchor(family[a], overlay, defn.id))
    palette2, overlay2 = prepare(adapted, train, kernel, stride, ranks, num_classes,
                                 calib_batches, cfg.batch_size, cfg.seed + 1)
    for a, (w, b) in overlay2.heads.items():
        w.data[...] = adapted[a].head["w"].data
        b.data[...] = adapted[a].head["b"].data
    stage2 = AdaptConfig(**{**cfg.__dict__, "epochs": cfg.epochs - share * len(family)})
    state = make_state(palette2, overlay2, stage2, len(train))
    return run_adaptation(state, train, stage2, on_step, on_epoch)
