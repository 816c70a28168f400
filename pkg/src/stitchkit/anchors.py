"""Tiny pre-norm transformer classifiers used as stitching anchors."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import VOCAB_SIZE, Batch
from .optim import AdamW, cosine_lr
from .tensor import Tensor

ATTN_PROJ = ("q", "k", "v", "o")


@dataclass(frozen=True)
class AnchorConfig:
    depth: int
    dim: int
    heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 10
    seq_len: int = 16
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("an anchor needs depth >= 2 so that both head and tail are nonempty")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or not float(self.mlp_ratio * self.dim).is_integer():
            raise ValueError("mlp_ratio * dim must be a positive integer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.dim)

    def to_dict(self):
        return asdict(self)


def block_macs(cfg: AnchorConfig) -> int:
    """Multiply-accumulates of one block at batch 1."""
    t, d = cfg.seq_len, cfg.dim
    attn = 4 * t * d * d + 2 * t * t * d
    ffn = 2 * t * d * cfg.hidden
    return attn + ffn


def head_macs(cfg: AnchorConfig, num_classes: int | None = None) -> int:
    return cfg.dim * (num_classes or cfg.num_classes)


def anchor_macs(cfg: AnchorConfig) -> int:
    # token/position lookup costs no MACs
    return cfg.depth * block_macs(cfg) + head_macs(cfg)


@dataclass
class Anchor:
    config: AnchorConfig
    embed: dict[str, Tensor]
    blocks: list[dict[str, Tensor]]
    norm: dict[str, Tensor]
    head: dict[str, Tensor]
    index: int = 0
    frozen: bool = False
    name: str = field(default="")

    def parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.items()}
        for i, blk in enumerate(self.blocks, start=1):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.items()})
        out.update({f"norm.{k}": v for k, v in self.norm.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    @property
    def flops(self) -> int:
        return anchor_macs(self.config)

    def count_params(self) -> dict[str, int]:
        d, h = self.config.dim, self.config.hidden
        per_block_attn = 4 * d * d + 4 * d
        per_block_ffn = 2 * d * h + h + d
        per_block_norm = 4 * d
        return {
            "embed": sum(p.size for p in self.embed.values()),
            "attention": self.config.depth * per_block_attn,
            "ffn": self.config.depth * per_block_ffn,
            "norm": self.config.depth * per_block_norm + 2 * d,
            "head": d * self.config.num_classes + self.config.num_classes,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, p in self.parameters().items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        return self


def init_anchor(cfg: AnchorConfig, rng: np.random.Generator, std: float = 0.02) -> Anchor:
    d, h = cfg.dim, cfg.hidden

    def w(*shape):
        return Tensor(std * rng.standard_normal(shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    embed = {"tok": w(cfg.vocab_size, d), "pos": w(cfg.seq_len, d)}
    blocks = []
    for _ in range(cfg.depth):
        blk = {"ln1.g": ones(d), "ln1.b": zeros(d)}
        for p in ATTN_PROJ:
            blk[f"attn.{p}.w"] = w(d, d)
            blk[f"attn.{p}.b"] = zeros(d)
        blk.update({"ln2.g": ones(d), "ln2.b": zeros(d),
                    "fc1.w": w(d, h), "fc1.b": zeros(h), "fc2.w": w(h, d), "fc2.b": zeros(d)})
        blocks.append(blk)
    norm = {"g": ones(d), "b": zeros(d)}
    head = {"w": w(d, cfg.num_classes), "b": zeros(cfg.num_classes)}
    return Anchor(cfg, embed, blocks, norm, head)


def build_family(configs: list[AnchorConfig], seed: int = 0) -> list[Anchor]:
    """Initialise one anchor per config; configs must be strictly increasing in MACs."""
    if len(configs) < 2:
        raise ValueError("a stitchable family needs at least 2 anchors")
    costs = [anchor_macs(c) for c in configs]
    if len(set(costs)) != len(costs):
        raise ValueError("family members must have distinct complexities")
    if costs != sorted(costs):
        raise ValueError("family configs must be sorted ascending by FLOPs")
    if len({(c.seq_len, c.vocab_size) for c in configs}) != 1:
        raise ValueError("all anchors must share seq_len and vocab_size")
    family = []
    for i, cfg in enumerate(configs):
        anchor = init_anchor(cfg, np.random.default_rng([seed, i]))
        anchor.index = i
        anchor.name = f"anchor{i}-d{cfg.depth}w{cfg.dim}"
        family.append(anchor)
    return family


# -- forward ------------------------------------------------------------------------

def _linear(x, blk, proj, key, overlay):
    w = blk[f"attn.{proj}.w"]
    if overlay is not None:
        w = overlay.weight(key, w)
    y = x @ w + blk[f"attn.{proj}.b"]
    if overlay is not None and proj == "o":
        b_s = overlay.bias(key)
        if b_s is not None:
            y = y + b_s
    return y


def block_forward(anchor: Anchor, x: Tensor, j: int, overlay=None) -> Tensor:
    """Run block ``j`` (1-based) of ``anchor`` on ``x`` of shape [B, T, D]."""
    cfg = anchor.config
    blk = anchor.blocks[j - 1]
    bsz, seq, d = x.shape
    nh, dh = cfg.heads, d // cfg.heads

    h = T.layer_norm(x, blk["ln1.g"], blk["ln1.b"])
    q, k, v = (_linear(h, blk, p, (anchor.index, j, p), overlay) for p in ("q", "k", "v"))

    def split(t):
        return t.reshape(bsz, seq, nh, dh).transpose(0, 2, 1, 3)

    q, k, v = split(q), split(k), split(v)
    att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
    x = x + _linear(ctx, blk, "o", (anchor.index, j, "o"), overlay)

    h = T.layer_norm(x, blk["ln2.g"], blk["ln2.b"])
    h = T.gelu(h @ blk["fc1.w"] + blk["fc1.b"])
    return x + (h @ blk["fc2.w"] + blk["fc2.b"])


def embed_forward(anchor: Anchor, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != anchor.config.seq_len:
        raise ValueError(f"expected tokens of shape [batch, {anchor.config.seq_len}], got {tokens.shape}")
    return T.take_rows(anchor.embed["tok"], tokens) + anchor.embed["pos"]


def head_forward(anchor: Anchor, batch, l: int, overlay=None) -> Tensor:
    """Activations after block ``l`` (1 <= l <= depth-1)."""
    if not 1 <= l <= anchor.config.depth - 1:
        raise IndexError(f"head split l={l} outside [1, {anchor.config.depth - 1}]")
    return _run(anchor, _tokens(batch), 1, l, overlay)


def tail_forward(anchor: Anchor, acts: Tensor, m: int, overlay=None) -> Tensor:
    """Run blocks ``m..depth`` then the classifier (2 <= m <= depth)."""
    if not 2 <= m <= anchor.config.depth:
        raise IndexError(f"tail entry m={m} outside [2, {anchor.config.depth}]")
    x = acts
    for j in range(m, anchor.config.depth + 1):
        x = block_forward(anchor, x, j, overlay)
    return classify(anchor, x, overlay)


def classify(anchor: Anchor, x: Tensor, overlay=None) -> Tensor:
    x = T.layer_norm(x, anchor.norm["g"], anchor.norm["b"]).mean(axis=1)
    head = overlay.head(anchor.index) if overlay is not None else None
    w, b = (anchor.head["w"], anchor.head["b"]) if head is None else head
    return x @ w + b


def full_forward(anchor: Anchor, batch, overlay=None) -> Tensor:
    x = _run(anchor, _tokens(batch), 1, anchor.config.depth, overlay)
    return classify(anchor, x, overlay)


def _run(anchor, tokens, first, last, overlay):
    x = embed_forward(anchor, tokens)
    for j in range(first, last + 1):
        x = block_forward(anchor, x, j, overlay)
    return x


def _tokens(batch):
    return batch.tokens if isinstance(batch, Batch) else np.asarray(batch)


# -- source-domain pre-training -----------------------------------------------------------

def accuracy(logits: Tensor, labels) -> float:
    return float((logits.data.argmax(axis=1) == np.asarray(labels)).mean())


def evaluate_anchor(anchor: Anchor, data: Batch, overlay=None, batch_size: int = 256) -> float:
    correct = 0
    for b in data.batches(batch_size):
        correct += int((full_forward(anchor, b, overlay).data.argmax(axis=1) == b.labels).sum())
    return correct / len(data)


def pretrain_anchor(anchor: Anchor, dataset: Batch, epochs: int, lr: float = 1e-3,
                    batch_size: int = 64, weight_decay: float = 1e-4, seed: int = 0) -> Anchor:
    """Fully train ``anchor`` with cross-entropy on ``dataset``, then freeze it."""
    if anchor.frozen:
        raise RuntimeError(f"{anchor.name} is frozen; pre-training must happen before adaptation")
    dataset.validate(anchor.config.vocab_size, anchor.config.num_classes)
    params = list(anchor.parameters().values())
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = epochs * steps_per_epoch
    it = 0
    for _ in range(epochs):
        for b in dataset.batches(batch_size, rng):
            AdamW.zero_grad(params)
            T.backward(T.cross_entropy(full_forward(anchor, b), b.labels))
            opt.step(params, lr=cosine_lr(lr, it, total, warmup=steps_per_epoch))
            it += 1
    return anchor.freeze()
