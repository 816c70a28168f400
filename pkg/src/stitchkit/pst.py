"""Parameter-efficient stitch fine-tuning.

Every attention projection of every anchor and every stitching layer carries
one low-rank update shared by all stitches that pass through it. Attention
output projections and stitching layers additionally get a bias vector per
stitch. Each anchor gets one fresh target-task classifier shared by the
stitches that end in it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import ATTN_PROJ
from .stitching import Palette, StitchDefinition, stitch_forward, traversed_blocks
from .tensor import Tensor

LORA_STD = 0.02


@dataclass
class LoRAFactor:
    """``W + down @ up`` with ``down`` [d, r] zero-initialised and ``up`` [r, k] Gaussian."""

    down: Tensor
    up: Tensor

    @property
    def r(self) -> int:
        return self.down.shape[1]

    @classmethod
    def create(cls, d, k, r, rng, std=LORA_STD):
        if not 1 <= r <= min(d, k) / 2:
            raise ValueError(f"LoRA rank {r} must lie in [1, min({d}, {k}) / 2]")
        return cls(Tensor(np.zeros((d, r)), requires_grad=True),
                   Tensor(std * rng.standard_normal((r, k)), requires_grad=True))

    def delta(self) -> Tensor:
        return self.down @ self.up


@dataclass
class PSTOverlay:
    lora: dict[tuple, LoRAFactor] = field(default_factory=dict)
    bias: dict[tuple, Tensor] = field(default_factory=dict)  # (stitch id, hook key) -> b^s
    heads: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)
    ranks: list[int] = field(default_factory=list)
    num_classes: int = 0

    def view(self, stitch_id: int) -> "StitchView":
        return StitchView(self, stitch_id)

    def heads_only(self) -> "StitchView":
        """A view with the target heads but without any LoRA or stitch bias."""
        return StitchView(self, None, use_pst=False)

    def tensors(self) -> dict[str, tuple[Tensor, str]]:
        """Name -> (tensor, role) for checkpointing; names are stable across runs."""
        out = {}
        for key, f in self.lora.items():
            name = _key_name(key)
            out[f"lora.{name}.down"] = (f.down, "lora")
            out[f"lora.{name}.up"] = (f.up, "lora")
        for (sid, key), b in self.bias.items():
            out[f"bias.s{sid}.{_key_name(key)}"] = (b, "bias")
        for a, (w, b) in self.heads.items():
            out[f"head.{a}.w"] = (w, "head")
            out[f"head.{a}.b"] = (b, "head")
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, (t, _) in self.tensors().items()}

    def load_state_dict(self, state):
        for k, (t, _) in self.tensors().items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        return self

    def num_trainable(self) -> int:
        return sum(t.size for t, _ in self.tensors().values())


def _key_name(key) -> str:
    return ".".join(str(k) for k in key)


class StitchView:
    """What a forward pass sees of the overlay for one stitch."""

    def __init__(self, overlay: PSTOverlay, stitch_id, use_pst=True):
        self.overlay = overlay
        self.stitch_id = stitch_id
        self.use_pst = use_pst

    def weight(self, key, W: Tensor) -> Tensor:
        return effective_weight(key, self.overlay, W) if self.use_pst else W

    def bias(self, key):
        if not self.use_pst:
            return None
        return self.overlay.bias.get((self.stitch_id, key))

    def head(self, anchor_index):
        return self.overlay.heads.get(anchor_index)


def effective_weight(key, overlay: PSTOverlay, W: Tensor) -> Tensor:
    f = overlay.lora.get(key)
    return W if f is None else W + f.delta()


def hook_keys(defn: StitchDefinition, configs) -> list[tuple]:
    keys = [(a, j, "o") for a, j in traversed_blocks(defn, configs)]
    if not defn.is_anchor:
        keys.append(("stitch", defn.stitch_layer_id))
    return keys


def default_ranks(n: int) -> list[int]:
    return [max(1, 8 >> i) for i in range(n)]


def init_pst(palette: Palette, ranks=None, num_classes=None, seed: int = 0,
             stitch_rank=lambda d1: d1 // 4) -> PSTOverlay:
    """Attach zero-product LoRA factors, zero stitch biases and fresh heads."""
    family = palette.family
    configs = [a.config for a in family]
    ranks = list(default_ranks(len(family)) if ranks is None else ranks)
    if len(ranks) != len(family) or min(ranks) < 1:
        raise ValueError("need one positive LoRA rank per anchor")
    num_classes = num_classes or configs[-1].num_classes
    rng = np.random.default_rng([seed, 7])
    ov = PSTOverlay(ranks=ranks, num_classes=num_classes)
    for a, cfg in enumerate(configs):
        for j in range(1, cfg.depth + 1):
            for p in ATTN_PROJ:
                ov.lora[(a, j, p)] = LoRAFactor.create(cfg.dim, cfg.dim, ranks[a], rng)
    for layer in palette.layers:
        ov.lora[layer.key] = LoRAFactor.create(layer.d1, layer.d2, stitch_rank(layer.d1), rng)
    for s in palette.stitches:
        for key in hook_keys(s, configs):
            width = configs[key[0]].dim if key[0] != "stitch" else palette.layers[key[1]].d2
            ov.bias[(s.id, key)] = Tensor(np.zeros(width), requires_grad=True)
    for a, cfg in enumerate(configs):
        ov.heads[a] = (Tensor(LORA_STD * rng.standard_normal((cfg.dim, num_classes)), requires_grad=True),
                       Tensor(np.zeros(num_classes), requires_grad=True))
    return ov


def trainable_set(defn: StitchDefinition, overlay: PSTOverlay, palette: Palette) -> dict[str, Tensor]:
    """Exactly the tensors one step on ``defn`` may touch, keyed by checkpoint name."""
    if defn.id >= len(palette.stitches) or palette.stitches[defn.id] != defn:
        raise KeyError(f"stitch {defn.id} is not part of this palette")
    configs = [a.config for a in palette.family]
    out = {}
    for a, j in traversed_blocks(defn, configs):
        for p in ATTN_PROJ:
            f = overlay.lora[(a, j, p)]
            out[f"lora.{a}.{j}.{p}.down"] = f.down
            out[f"lora.{a}.{j}.{p}.up"] = f.up
    if not defn.is_anchor:
        key = ("stitch", defn.stitch_layer_id)
        f = overlay.lora[key]
        out[f"lora.{_key_name(key)}.down"] = f.down
        out[f"lora.{_key_name(key)}.up"] = f.up
    for key in hook_keys(defn, configs):
        out[f"bias.s{defn.id}.{_key_name(key)}"] = overlay.bias[(defn.id, key)]
    w, b = overlay.heads[defn.large_anchor]
    out[f"head.{defn.large_anchor}.w"] = w
    out[f"head.{defn.large_anchor}.b"] = b
    return out


class _ProbeView(StitchView):
    """Replaces selected effective weights with fresh leaves to read full-weight gradients."""

    def __init__(self, overlay, stitch_id, probes):
        super().__init__(overlay, stitch_id)
        self.probes = probes

    def weight(self, key, W):
        if key in self.probes:
            return self.probes[key]
        return super().weight(key, W)


def full_weight_gradient(defn, palette, overlay, batch, keys) -> np.ndarray:
    """Task-loss gradient wrt the merged weights ``W + down @ up`` at ``keys``, flattened."""
    probes = {}
    for key in keys:
        a, j, p = key
        W = palette.family[a].blocks[j - 1][f"attn.{p}.w"]
        probes[key] = Tensor(effective_weight(key, overlay, W).data.copy(), requires_grad=True)
    view = _ProbeView(overlay, defn.id, probes)
    logits = stitch_forward(defn, palette.family, palette.layers, view, batch)
    T.backward(T.cross_entropy(logits, batch.labels))
    # leaves of the overlay also collected grads; discard them
    for t, _ in overlay.tensors().values():
        t.grad = None
    return np.concatenate([probes[k].grad.reshape(-1) if probes[k].grad is not None
                           else np.zeros(probes[k].size) for k in keys])


def pairwise_gradient_angles(stitches, palette, overlay, batch, target) -> np.ndarray:
    """Angles in degrees between stitches' gradients on the Q/K/V weights of ``target``.

    ``target`` is an ``(anchor, block)`` pair every stitch must traverse. Entries
    involving a zero-norm gradient are NaN.
    """
    stitches = list(stitches)
    if len(stitches) < 2:
        raise ValueError("need at least two stitches to compare")
    configs = [a.config for a in palette.family]
    for s in stitches:
        if tuple(target) not in traversed_blocks(s, configs):
            raise ValueError(f"stitch {s.id} does not traverse block {target}")
    keys = [(target[0], target[1], p) for p in ("q", "k", "v")]
    G = np.stack([full_weight_gradient(s, palette, overlay, batch, keys) for s in stitches])
    return angle_matrix(G)


def angle_matrix(G) -> np.ndarray:
    """Pairwise angles (degrees) between the rows of ``G``; NaN where a row is zero."""
    G = np.asarray(G, dtype=np.float64)
    norms = np.linalg.norm(G, axis=1)
    n = len(G)
    out = np.full((n, n), np.nan)
    for i in range(n):
        if norms[i] == 0:
            continue
        out[i, i] = 0.0
        for j in range(i + 1, n):
            if norms[j] == 0:
                continue
            c = np.clip(G[i] @ G[j] / (norms[i] * norms[j]), -1.0, 1.0)
            out[i, j] = out[j, i] = np.degrees(np.arccos(c))
    return out


def merge_anchor(anchor, overlay: PSTOverlay, stitch_id: int):
    """A new frozen anchor with this overlay's LoRA updates, stitch biases and head folded in."""
    from .anchors import Anchor

    clone = Anchor(anchor.config,
                   {k: Tensor(v.data.copy()) for k, v in anchor.embed.items()},
                   [{k: Tensor(v.data.copy()) for k, v in blk.items()} for blk in anchor.blocks],
                   {k: Tensor(v.data.copy()) for k, v in anchor.norm.items()},
                   {k: Tensor(v.data.copy()) for k, v in anchor.head.items()},
                   index=anchor.index, frozen=True, name=anchor.name + "-merged")
    for j, blk in enumerate(clone.blocks, start=1):
        for p in ATTN_PROJ:
            f = overlay.lora.get((anchor.index, j, p))
            if f is not None:
                blk[f"attn.{p}.w"].data += f.down.data @ f.up.data
        b_s = overlay.bias.get((stitch_id, (anchor.index, j, "o")))
        if b_s is not None:
            blk["attn.o.b"].data += b_s.data
    head = overlay.heads.get(anchor.index)
    if head is not None:
        clone.head = {"w": Tensor(head[0].data.copy()), "b": Tensor(head[1].data.copy())}
    return clone
