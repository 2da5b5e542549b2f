"""Run configuration: network hyperparameters, data and schedule settings.

Config files are plain `key=value` lines with `#` comments; command-line
flags override file values. The toy preset collects every desk-scale
override in one place.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .numerics import InputError, require


@dataclass
class NetConfig:
    frames: int = 6        # clip length T
    levels: int = 4        # pyramid levels L
    channels: int = 256    # embedding width C
    heads: int = 8         # attention heads M
    points: int = 4        # sampling points per (frame, level) K
    enc_layers: int = 6
    dec_layers: int = 6
    num_queries: int = 300  # object queries N
    ffn_dim: int = 1024
    num_classes: int = 2   # benign / malignant; logits get one extra no-object column

    def validate(self) -> None:
        require(self.frames >= 1 and self.levels >= 1, "NetConfig: frames and levels must be >= 1")
        require(self.channels % self.heads == 0, "NetConfig: channels must divide evenly over heads")
        require(self.enc_layers >= 0 and self.dec_layers >= 0, "NetConfig: layer counts must be >= 0")
        require(self.num_queries >= 1, "NetConfig: need at least one object query")
        require(self.num_classes >= 1, "NetConfig: need at least one real class")


@dataclass
class RunConfig:
    # network (paper-scale defaults; RunConfig.toy() holds the desk preset)
    frames: int = 6
    levels: int = 4
    channels: int = 256
    heads: int = 8
    points: int = 4
    enc_layers: int = 6
    dec_layers: int = 6
    num_queries: int = 300
    ffn_dim: int = 1024
    num_classes: int = 2
    # synthetic data
    height: int = 64
    width: int = 64
    video_frames: int = 32
    train_videos: int = 40
    test_videos: int = 10
    difficulty: float = 0.3
    # optimization: two phases, adaptive-moment then plain SGD, constant lr
    lr: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 1
    phase1_epochs: int = 8
    phase2_epochs: int = 20
    grad_clip: float = 0.1          # global-norm clip; 0 disables
    steps_per_epoch: int = 0        # 0 = one clip per training video
    eval_triples: int = 2           # per-epoch AP log subsampling, triples per test video
    # run plumbing
    seed: int = 0
    precision: str = "f32"          # f32 | f64
    data_dir: str = "data"
    out_dir: str = "out"

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: small net, short two-phase schedule, higher lr."""
        base = dict(
            levels=2, channels=32, heads=2, points=2,
            enc_layers=2, dec_layers=2, num_queries=20, ffn_dim=64,
            lr=1e-3, phase1_epochs=3, phase2_epochs=5,
            grad_clip=5.0, steps_per_epoch=120,
        )
        base.update(overrides)
        return cls(**base)

    def net_config(self) -> NetConfig:
        cfg = NetConfig(frames=self.frames, levels=self.levels, channels=self.channels,
                        heads=self.heads, points=self.points, enc_layers=self.enc_layers,
                        dec_layers=self.dec_layers, num_queries=self.num_queries,
                        ffn_dim=self.ffn_dim, num_classes=self.num_classes)
        cfg.validate()
        return cfg

    def dtype(self):
        if self.precision == "f32":
            return np.float32
        if self.precision == "f64":
            return np.float64
        raise InputError(f"precision must be f32 or f64, got {self.precision!r}")

    def validate(self) -> None:
        self.net_config()
        require(self.lr > 0, "RunConfig: lr must be > 0")
        require(self.phase1_epochs >= 0 and self.phase2_epochs >= 0,
                "RunConfig: epoch counts must be >= 0")
        require(self.batch_size >= 1, "RunConfig: batch_size must be >= 1")
        self.dtype()


def parse_value(field: dataclasses.Field, raw: str):
    kind = type(field.default)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        return kind(raw)
    except ValueError as exc:
        raise InputError(f"config: cannot parse {field.name}={raw!r} as {kind.__name__}") from exc


def read_config_file(path: str) -> dict[str, str]:
    """Parse `key=value` lines; `#` starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise InputError(f"config: cannot read {path}: {exc}") from exc
    return values


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, raw in overrides.items():
        if key not in fields:
            raise InputError(f"config: unknown key {key!r}")
        updates[key] = parse_value(fields[key], raw)
    return dataclasses.replace(cfg, **updates)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def env_seed_fallback() -> int | None:
    raw = os.environ.get("STDA_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise InputError(f"STDA_SEED must be an integer, got {raw!r}") from exc
