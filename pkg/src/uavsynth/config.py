"""Run configuration shared by the CLI and the experiment helpers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset_io import SceneDataset, split_frames
from .decoder import DecoderParams
from .plane_field import PlaneStack
from .trainer import ConfigError, LossWeights, Schedule, TrainingData, TrainState

CLI_MODES = {"stock": "stock", "extended": "extended", "spatial-only": "spatial_only",
             "spatial_only": "spatial_only"}


@dataclass
class RunConfig:
    mode: str = "extended"
    D: int = 32
    resolution_xy: int = 128
    resolution_z: int | None = None     # default: half of resolution_xy
    resolution_t: int | None = None     # default: ceil(training frames / 2)
    scale_multipliers: tuple = (1, 2, 4)
    hidden: int = 64
    density_bias: float = -1.0
    seed: int = 0
    holdout_every: int = 2
    weights: LossWeights | None = None
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if self.mode not in CLI_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected stock, extended or spatial-only")
        self.mode = CLI_MODES[self.mode]
        if self.D < 1:
            raise ConfigError("D must be >= 1")
        self.scale_multipliers = tuple(int(m) for m in self.scale_multipliers)
        if isinstance(self.weights, dict):
            self.weights = LossWeights.for_mode(self.mode, **self.weights)
        if self.weights is None:
            self.weights = LossWeights.for_mode(self.mode)
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)

    def base_resolution(self, n_train_frames: int) -> tuple[int, int, int, int]:
        z = self.resolution_z or max(2, self.resolution_xy // 2)
        t = self.resolution_t or max(2, math.ceil(n_train_frames / 2))
        return (self.resolution_xy, self.resolution_xy, z, t)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_multipliers"] = list(self.scale_multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def toy_config(mode: str = "extended", seed: int = 0, iterations: int = 2000) -> RunConfig:
    """Desk-scale settings for the 64x64 toy scenes: small planes and a faster learning rate."""
    return RunConfig(mode=mode, D=8, resolution_xy=32, scale_multipliers=(1, 2), hidden=64,
                     seed=seed, schedule=Schedule(iterations=iterations, batch_size=1024, lr=1e-2,
                                                  n_samples=32, eval_samples=32))


PRESETS = {"toy": toy_config}


def load_config(name_or_path) -> dict:
    """Config dict from a preset name or a JSON file."""
    if str(name_or_path) in PRESETS:
        d = PRESETS[str(name_or_path)]().to_dict()
        d.pop("weights")  # re-derived from whichever mode the run ends up using
        return d
    with open(name_or_path) as fh:
        return json.load(fh)


def init_state(cfg: RunConfig, n_train_frames: int) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    stack = PlaneStack.create(cfg.mode, cfg.D, cfg.base_resolution(n_train_frames),
                              cfg.scale_multipliers, rng)
    dec = DecoderParams.create(cfg.mode, stack.feature_size, cfg.hidden, rng,
                               density_bias=cfg.density_bias)
    return TrainState.create(stack, dec, cfg.seed)


def prepare_data(ds: SceneDataset, holdout_every: int = 2) -> TrainingData:
    train_idx, held_idx = split_frames(ds, holdout_every)
    return TrainingData.from_frames([ds.frames[i] for i in train_idx], ds.bounds,
                                    [ds.frames[i] for i in held_idx])
