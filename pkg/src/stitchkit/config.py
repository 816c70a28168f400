"""Experiment configuration stored as flat ``key = value`` text."""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .anchors import AnchorConfig, anchor_macs
from .controller import AdaptConfig, ConfigError

PIPELINES = ("one-stage", "adapt-then-stitch")
_SECTION = "stitchkit"


@dataclass
class ExperimentConfig:
    depths: list = field(default_factory=lambda: [2, 4])
    dims: list = field(default_factory=lambda: [32, 64])
    heads: list = field(default_factory=lambda: [2, 2])
    mlp_ratio: float = 2.0
    seq_len: int = 16
    num_classes: int = 10
    sharpness: float = 4.0
    train_samples: int = 2000
    eval_samples: int = 1000
    kernel: int = 2
    stride: int = 1
    ranks: list = field(default_factory=lambda: [8, 4])
    eta: float = 0.9
    n_intervals: int = 6
    warmup_frac: float = 0.2
    normalize_scores: bool = True
    epochs: int = 30
    pretrain_epochs: int = 20
    pretrain_lr: float = 3e-3
    base_lr: float = 8e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    lr_warmup_epochs: int = 10
    calib_batches: int = 8
    seed: int = 0
    pipeline: str = "one-stage"
    out_dir: str = "runs/default"

    def anchor_configs(self) -> list[AnchorConfig]:
        return [AnchorConfig(d, w, h, self.mlp_ratio, self.num_classes, self.seq_len)
                for d, w, h in zip(self.depths, self.dims, self.heads)]

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(self.epochs, self.batch_size, self.base_lr, self.weight_decay,
                           self.lr_warmup_epochs, self.eta, self.n_intervals, self.warmup_frac,
                           self.normalize_scores, self.seed)

    def validate(self) -> "ExperimentConfig":
        n = len(self.depths)
        if n < 2 or not (len(self.dims) == len(self.heads) == len(self.ranks) == n):
            raise ConfigError("depths, dims, heads and ranks must list the same number (>= 2) of anchors")
        try:
            cfgs = self.anchor_configs()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        costs = [anchor_macs(c) for c in cfgs]
        if costs != sorted(costs) or len(set(costs)) != n:
            raise ConfigError("anchors must be listed in strictly increasing FLOPs order")
        for r, c in zip(self.ranks, cfgs):
            if not 1 <= r <= c.dim / 2:
                raise ConfigError(f"rank {r} outside [1, {c.dim // 2}] for width {c.dim}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel and stride must be positive")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        if self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("sample counts must be positive")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.calib_batches * self.batch_size * self.seq_len < 4 * self.dims[0]:
            raise ConfigError("calibration budget is below 4 * d1 tokens")
        self.adapt_config().validate()
        return self

    # -- text form -----------------------------------------------------------------------
    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(f"[{_SECTION}]\n{text}")
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in parser[_SECTION].items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = json.loads(raw)
            except json.JSONDecodeError:
                kwargs[key] = raw.strip()
        cfg = cls(**kwargs)
        _check_types(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.loads(text)


def _check_types(cfg: ExperimentConfig):
    defaults = ExperimentConfig()
    for f in fields(cfg):
        want, got = type(getattr(defaults, f.name)), getattr(cfg, f.name)
        if want is float and isinstance(got, int) and not isinstance(got, bool):
            setattr(cfg, f.name, float(got))
        elif not isinstance(got, want) or (want is int and isinstance(got, bool)):
            raise ConfigError(f"{f.name}: expected {want.__name__}, got {got!r}")


def resolve_out(cfg: ExperimentConfig, flag: str | None = None) -> Path:
    """``--out`` beats ``STITCHKIT_OUT`` beats the config's ``out_dir``."""
    return Path(flag or os.environ.get("STITCHKIT_OUT") or cfg.out_dir)
