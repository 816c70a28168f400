"""Stitch palette enumeration, stitching layers and closed-form cost accounting."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import Anchor, AnchorConfig, anchor_macs, block_macs, head_forward, head_macs, tail_forward, full_forward
from .tensor import Tensor


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StitchDefinition:
    id: int
    small_anchor: int
    large_anchor: int
    l: int
    m: int
    stitch_layer_id: int = -1
    is_anchor: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class StitchingLayer:
    """Frozen least-squares map ``M`` from width ``d1`` to ``d2``."""

    d1: int
    d2: int
    M: Tensor = None
    key: tuple = ()

    def __post_init__(self):
        if self.M is None:
            self.M = Tensor(np.zeros((self.d1, self.d2)))


@dataclass
class CostReport:
    flops: int
    params_total: int
    params_trainable: int


@dataclass
class Palette:
    family: list[Anchor]
    stitches: list[StitchDefinition]
    layers: list[StitchingLayer] = field(default_factory=list)

    def __len__(self):
        return len(self.stitches)

    def __getitem__(self, sid) -> StitchDefinition:
        try:
            s = self.stitches[sid]
        except (IndexError, TypeError):
            raise KeyError(f"unknown stitch id {sid!r}") from None
        return s

    @property
    def teacher(self) -> StitchDefinition:
        """The degenerate stitch of the largest anchor."""
        top = len(self.family) - 1
        return next(s for s in self.stitches if s.is_anchor and s.small_anchor == top)

    def flops(self) -> np.ndarray:
        return np.array([cost_of(s, self.family).flops for s in self.stitches], dtype=np.int64)


def anchor_map(l: int, L: int, M: int) -> int:
    return (l * M) // L + 1


def enumerate_stitches(family, kernel: int = 2, stride: int = 1) -> list[StitchDefinition]:
    """Anchor stitches first (ids 0..Z-1), then cross stitches ordered by (pair, l, m).

    ``family`` may be a list of anchors or of :class:`AnchorConfig`.
    """
    configs = [getattr(a, "config", a) for a in family]
    if len(configs) < 2:
        raise ValueError("stitching needs a family of at least 2 anchors")
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be positive")
    costs = [anchor_macs(c) for c in configs]
    if costs != sorted(costs) or len(set(costs)) != len(costs):
        raise ValueError("family must be sorted by strictly increasing FLOPs")

    out = [StitchDefinition(i, i, i, c.depth, c.depth, -1, True) for i, c in enumerate(configs)]
    layer_id = 0
    for a in range(len(configs) - 1):
        L, M = configs[a].depth, configs[a + 1].depth
        for l in range(1, L, stride):
            start = anchor_map(l, L, M)
            for m in range(start, start + kernel):
                if 2 <= m <= M:
                    out.append(StitchDefinition(len(out), a, a + 1, l, m, layer_id))
                    layer_id += 1
    return out


def build_palette(family, kernel=2, stride=1) -> Palette:
    stitches = enumerate_stitches(family, kernel, stride)
    layers = []
    for s in stitches:
        if s.is_anchor:
            continue
        d1, d2 = family[s.small_anchor].config.dim, family[s.large_anchor].config.dim
        layers.append(StitchingLayer(d1, d2, key=("stitch", s.stitch_layer_id)))
    return Palette(family, stitches, layers)


def ls_init(acts_small, acts_large, rtol: float = 1e-10) -> np.ndarray:
    """Least-squares map ``M = pinv(acts_small) @ acts_large``.

    The pseudoinverse discards singular values below ``rtol * sigma_max``;
    rank-deficient inputs still get the minimum-norm solution, with a warning.
    """
    A = np.asarray(getattr(acts_small, "data", acts_small), dtype=np.float64)
    B = np.asarray(getattr(acts_large, "data", acts_large), dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"paired activations must be [T, d1] and [T, d2], got {A.shape}, {B.shape}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rtol * s[0] if s.size else s.astype(bool)
    if A.shape[0] < A.shape[1] or keep.sum() < A.shape[1]:
        warnings.warn(
            f"least-squares init is rank deficient ({int(keep.sum())} of {A.shape[1]} directions, "
            f"{A.shape[0]} tokens); returning the minimum-norm solution",
            RankDeficiencyWarning, stacklevel=2,
        )
    return (Vt[keep].T / s[keep]) @ (U[:, keep].T @ B)


def init_stitching_layers(palette: Palette, calibration, rtol: float = 1e-10) -> Palette:
    """Fit every stitching layer on paired activations from ``calibration`` batches."""
    batches = list(calibration)
    for s in palette.stitches:
        if s.is_anchor:
            continue
        small, large = palette.family[s.small_anchor], palette.family[s.large_anchor]
        a = np.concatenate([head_forward(small, b, s.l).data.reshape(-1, small.config.dim) for b in batches])
        b_ = np.concatenate([head_forward(large, b, s.m - 1).data.reshape(-1, large.config.dim) for b in batches])
        if a.shape[0] < 4 * small.config.dim:
            raise ValueError(f"calibration gives {a.shape[0]} tokens; need at least {4 * small.config.dim}")
        palette.layers[s.stitch_layer_id].M = Tensor(ls_init(a, b_, rtol))
    return palette


def stitch_forward(defn: StitchDefinition, family, layers, overlay, batch) -> Tensor:
    """Logits of ``tail(large, m) . S . head(small, l)`` for one stitch."""
    bound = getattr(overlay, "stitch_id", None)
    if overlay is not None and bound is not None and bound != defn.id:
        raise ValueError(f"overlay is bound to stitch {bound}, not {defn.id}")
    if defn.is_anchor:
        return full_forward(family[defn.small_anchor], batch, overlay)
    h = head_forward(family[defn.small_anchor], batch, defn.l, overlay)
    layer = layers[defn.stitch_layer_id]
    M = layer.M if overlay is None else overlay.weight(layer.key, layer.M)
    x = h @ M
    if overlay is not None:
        b_s = overlay.bias(layer.key)
        if b_s is not None:
            x = x + b_s
    return tail_forward(family[defn.large_anchor], x, defn.m, overlay)


# -- cost accounting --------------------------------------------------------------------

def traversed_blocks(defn: StitchDefinition, configs) -> list[tuple[int, int]]:
    """(anchor index, 1-based block) pairs a stitch runs through."""
    if defn.is_anchor:
        return [(defn.small_anchor, j) for j in range(1, configs[defn.small_anchor].depth + 1)]
    head = [(defn.small_anchor, j) for j in range(1, defn.l + 1)]
    tail = [(defn.large_anchor, j) for j in range(defn.m, configs[defn.large_anchor].depth + 1)]
    return head + tail


def _frozen_block_params(cfg: AnchorConfig) -> int:
    d, h = cfg.dim, cfg.hidden
    return (4 * d * d + 4 * d) + (2 * d * h + h + d) + 4 * d


def trainable_count(defn: StitchDefinition, configs, ranks, num_classes=None) -> int:
    """Closed-form size of a stitch's trainable set: LoRA + stitch bias + head."""
    n = 0
    for a, _ in traversed_blocks(defn, configs):
        d, r = configs[a].dim, ranks[a]
        n += 4 * (d * r + r * d) + d
    if not defn.is_anchor:
        d1, d2 = configs[defn.small_anchor].dim, configs[defn.large_anchor].dim
        n += (d1 // 4) * (d1 + d2) + d2
    end = configs[defn.large_anchor]
    c = num_classes or end.num_classes
    return n + end.dim * c + c


def cost_of(defn: StitchDefinition, family, ranks=None, num_classes=None) -> CostReport:
    """MACs at batch 1 and parameter counts, without tracing.

    ``params_trainable`` is 0 unless per-anchor LoRA ``ranks`` are given.
    """
    configs = [getattr(a, "config", a) for a in family]
    small, large = configs[defn.small_anchor], configs[defn.large_anchor]
    c = num_classes or large.num_classes
    flops = head_macs(large, c)
    frozen = small.vocab_size * small.dim + small.seq_len * small.dim + 2 * large.dim
    for a, _ in traversed_blocks(defn, configs):
        flops += block_macs(configs[a])
        frozen += _frozen_block_params(configs[a])
    if not defn.is_anchor:
        flops += small.seq_len * small.dim * large.dim
        frozen += small.dim * large.dim
    trainable = trainable_count(defn, configs, ranks, num_classes) if ranks is not None else 0
    if ranks is None:
        frozen += large.dim * c + c
    return CostReport(int(flops), int(frozen + trainable), int(trainable))
