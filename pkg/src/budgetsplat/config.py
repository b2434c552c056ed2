"""Declarative training configuration.

One flat JSON object; every field has a default, unknown keys are rejected,
and CLI flags override file values. The companion schema file
(docs/config_schema.json) documents each field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .density import BudgetPolicy
from .forward import RenderOptions
from .optim import LearningRates


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # Run scope
    data_path: str | None = None
    out_dir: str | None = None
    iterations: int = 2000
    budget: int = 5000
    seed: int = 0
    threads: int = 1
    precision: str = "f32"  # or "f64"
    mode: str = "iterative"  # or "one_shot" (densify freely, prune once)

    # Model
    sh_degree: int = 2
    init_points: int = 1000
    init_opacity: float = 0.1

    # Loss
    loss_lambda: float = 0.2
    error_map_includes_ssim: bool = False

    # Optimizer (position rates are per unit scene extent)
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    # Density control schedule
    densify_begin: int = 500
    densify_end: int = 10_000
    grow_interval: int = 50
    budget_prune_interval: int = 100
    tau_grow: float = 2e-4
    growth_cap_fraction: float = 0.05
    split_scale_fraction: float = 0.01
    opacity_threshold: float = 0.005
    shift_eta: float = -1.0
    mix_balance: float | None = None  # None = auto-calibrate at first grow
    importance_mode: str = "alpha_tau"

    # Compensation
    compensate_begin: int = 10_000
    compensate_end: int = 15_000
    compensate_interval: int = 100
    compensate_top_k: int = 100
    compensate_opacity: float = 0.1

    # Opacity reset (0 disables)
    opacity_reset_iteration: int = 5000
    opacity_reset_value: float = 0.01
    opacity_reset_positions: bool = False

    # Rendering
    background: tuple = (0.0, 0.0, 0.0)
    alpha_skip: float = 1.0 / 255.0
    t_stop: float = 1e-4
    dilation: float = 0.3
    near: float = 0.01
    tile_size: int = 16
    depth_normalized: bool = False

    # Evaluation / IO
    eval_interval: int = 500
    eval_save_images: bool = True
    cache_capacity: int = 8

    # ------------------------------------------------------------------

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.mode not in ("iterative", "one_shot"):
            raise ConfigError(f"mode must be 'iterative' or 'one_shot', got {self.mode!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.cache_capacity < 1:
            raise ConfigError("cache_capacity must be >= 1")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ConfigError("sh_degree must be 0..3")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ConfigError("loss_lambda must be in [0, 1]")
        if len(tuple(self.background)) != 3:
            raise ConfigError("background must have 3 components")
        try:
            self.budget_policy(extent=1.0).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def budget_policy(self, extent: float) -> BudgetPolicy:
        return BudgetPolicy(
            budget=self.budget,
            grow_interval=self.grow_interval,
            budget_prune_interval=self.budget_prune_interval,
            densify_begin=self.densify_begin,
            densify_end=self.densify_end,
            compensate_begin=self.compensate_begin,
            compensate_end=self.compensate_end,
            compensate_interval=self.compensate_interval,
            compensate_top_k=self.compensate_top_k,
            compensate_opacity=self.compensate_opacity,
            opacity_threshold=self.opacity_threshold,
            split_scale=self.split_scale_fraction * extent,
            growth_cap_fraction=self.growth_cap_fraction,
            tau_grow=self.tau_grow,
            shift_eta=self.shift_eta,
            importance_mode=self.importance_mode,
        )

    def render_options(self) -> RenderOptions:
        return RenderOptions(
            background=tuple(self.background),
            alpha_skip=self.alpha_skip,
            t_stop=self.t_stop,
            early_stop=self.t_stop > 0,
            near=self.near,
            dilation=self.dilation,
            tile_size=self.tile_size,
            depth_normalized=self.depth_normalized,
        )

    def learning_rates(self, extent: float) -> LearningRates:
        return LearningRates(
            position_init=self.lr_position_init,
            position_final=self.lr_position_final,
            position_max_steps=max(self.iterations, 1),
            sh_dc=self.lr_sh_dc,
            sh_rest=self.lr_sh_rest,
            opacity=self.lr_opacity,
            scale=self.lr_scale,
            rotation=self.lr_rotation,
            extent=extent,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if isinstance(cfg.background, list):
            cfg.background = tuple(cfg.background)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
