"""Experiment configuration: training hyperparameters, profiles, JSON I/O.

Two built-in profiles exist. ``default`` mirrors the full-scale urban-street
experiment. ``desk`` shrinks the channel, network and snapshot counts so a
complete pretrain + fine-tune + evaluation cycle finishes in minutes on a
laptop; it is what the test suite and the demo scripts run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .channel import ChannelConfig
from .network import ArchSpec
from .scenario import DatasetSizes, WorldConfig, make_street_world
from .storage import (
    decode_channel,
    decode_sizes,
    decode_world,
    encode_channel,
    encode_sizes,
    encode_world,
)

__all__ = [
    "TrainConfig",
    "ExperimentConfig",
    "default_profile",
    "desk_profile",
    "load_config",
    "save_config",
]

_WEIGHTINGS = ("meta", "relu", "none")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for pretraining and detection-supervised fine-tuning.

    ``gamma`` mixes the detection-derived gradient with the labeled one,
    ``xi`` scales the per-sample reweighting, and ``weighting`` picks how raw
    alignment scores become sample weights: ``meta`` (affine around 1),
    ``relu`` (clip negatives), or ``none`` (all ones).

    The two learning-rate schedules are staircases: rate = ``lr *
    decay_factor ** max(0, (step - start) // every)``, with pretraining
    counting epochs and fine-tuning counting iterations.
    """

    gamma: float = 0.5
    xi: float = 1.0
    lr: float = 1e-3
    iterations: int = 10_000
    sigma_refresh_period: int = 500
    batch_labeled: int = 32
    batch_snapshots: int = 24
    pretrain_epochs: int = 5_000
    pretrain_lr: float = 1e-3
    lr_decay_factor: float = 0.9
    pretrain_decay_start: int = 2_000
    pretrain_decay_every: int = 100
    em_decay_start: int = 5_000
    em_decay_every: int = 200
    weighting: str = "meta"
    field_cell_size: float = 10.0
    field_floor: float = 0.25
    field_min_bin: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"train.gamma must be in [0, 1], got {self.gamma}")
        if self.xi < 0:
            raise ValueError(f"train.xi must be >= 0, got {self.xi}")
        for name in ("lr", "pretrain_lr", "field_cell_size", "field_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("iterations", "pretrain_epochs", "pretrain_decay_start", "em_decay_start"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0, got {getattr(self, name)}")
        for name in (
            "sigma_refresh_period",
            "batch_labeled",
            "batch_snapshots",
            "pretrain_decay_every",
            "em_decay_every",
            "field_min_bin",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(
                f"train.lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}"
            )
        if self.weighting not in _WEIGHTINGS:
            raise ValueError(
                f"train.weighting must be one of {_WEIGHTINGS}, got {self.weighting!r}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment end to end."""

    seed: int = 20260821
    world: WorldConfig = field(default_factory=make_street_world)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(input_shape=(2, 16, 52)))
    train: TrainConfig = field(default_factory=TrainConfig)
    sizes: DatasetSizes = field(default_factory=DatasetSizes)

    def __post_init__(self) -> None:
        want = (2, self.channel.n_antennas, self.channel.n_subcarriers)
        if tuple(self.arch.input_shape) != want:
            raise ValueError(
                f"arch.input_shape {tuple(self.arch.input_shape)} must match the channel "
                f"estimate layout {want} (re/im planes x antennas x subcarriers)"
            )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world": encode_world(self.world),
            "channel": encode_channel(self.channel),
            "arch": json.loads(self.arch.to_json()),
            "train": {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)},
            "sizes": encode_sizes(self.sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            seed=d["seed"],
            world=decode_world(d["world"]),
            channel=decode_channel(d["channel"]),
            arch=ArchSpec.from_json(json.dumps(d["arch"])),
            train=TrainConfig(**d["train"]),
            sizes=decode_sizes(d["sizes"]),
        )


def default_profile() -> ExperimentConfig:
    return ExperimentConfig(
        sizes=DatasetSizes(labeled_per_bs=300, multimodal=2000, test=500),
    )


def desk_profile() -> ExperimentConfig:
    """Minutes-scale profile: smaller channel, network and snapshot counts."""
    channel = ChannelConfig(n_antennas=8, n_subcarriers=16, n_pilot_symbols=12)
    return ExperimentConfig(
        channel=channel,
        arch=ArchSpec(input_shape=(2, 8, 16), conv_channels=(4, 8), fc_widths=(64, 32, 2)),
        train=TrainConfig(
            iterations=2000,
            batch_snapshots=12,
            em_decay_start=1000,
            em_decay_every=100,
            pretrain_epochs=400,
            pretrain_lr=1e-4,
            pretrain_decay_start=200,
            pretrain_decay_every=20,
        ),
        sizes=DatasetSizes(labeled_per_bs=300, multimodal=500, test=100),
    )


_PROFILES = {"default": default_profile, "desk": desk_profile}


def load_config(name_or_path: str | Path) -> ExperimentConfig:
    """Resolve a profile name ("default", "desk") or a JSON config file."""
    key = str(name_or_path)
    if key in _PROFILES:
        return _PROFILES[key]()
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(
            f"config {name_or_path!r} is neither a profile ({', '.join(_PROFILES)}) "
            f"nor an existing file"
        )
    return ExperimentConfig.from_dict(json.loads(path.read_text("utf-8")))


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8")


def with_train(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with some training hyperparameters replaced."""
    return replace(cfg, train=replace(cfg.train, **overrides))
