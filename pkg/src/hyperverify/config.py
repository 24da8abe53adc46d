"""Flat run configuration; every tunable default lives here."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"

    # data
    data_dir: str | None = None
    identities: int = 200
    samples_per_identity: int = 20
    image_size: int = 32
    latent_dim: int = 16
    max_shift: int = 3
    brightness: float = 0.2
    noise_sigma: float = 0.05
    families: int = 20
    family_spread: float = 0.6
    data_seed: int = 0
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0

    # backbone
    backbone_path: str | None = None
    embed_dim: int = 128
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    backbone_epochs: int = 10
    backbone_lr: float = 0.05
    backbone_batch: int = 64

    # hypernetwork
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    final_init_scale: float = 0.01

    # verifier
    arch: str = "desk"
    threshold: float = 0.5

    # training
    steps: int = 600
    n: int = 2
    initial_B: int = 4
    doublings: int = 3
    doubling_fractions: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    beta: float = 2.0
    alpha_start: float = 1e-6
    alpha_end: float = 1e-4
    alpha_ramp_fraction: float = 0.5
    kcs_start: int = 400
    use_kcs: bool = True
    use_norm_loss: bool = True
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup: int = 50
    kmeans_k: int | None = None
    kmeans_iters: int = 100
    bce_eps: float = 1e-7

    # evaluation
    eval_pairs: int = 1000
    eval_folds: int = 10
    eval_split: str = "test"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if len(self.doubling_fractions) != self.doublings:
            raise ConfigError("need one doubling fraction per doubling")
        if self.eval_split not in ("val", "test"):
            raise ConfigError("eval_split must be 'val' or 'test'")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> RunConfig:
        return self.from_dict({**self.to_dict(), **changes})

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
