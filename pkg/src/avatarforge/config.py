"""Training configuration: dataclass defaults mirroring a TOML file with
sections [optimize], [camera], [zoom], [lighting], [pose], [render],
[loss_weights], [arch]. Unknown keys and invalid values raise ConfigError
naming the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import tomli

from .body import REGIONS
from .field import ArchConfig
from .losses import LossWeights


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"config field '{field_name}': {message}")


def default_region_probs() -> dict:
    probs = {r: 1.0 / 12.0 for r in REGIONS if r != "full_body"}
    probs["full_body"] = 0.5
    return probs


@dataclass
class TrainConfig:
    # optimize
    prompt: str = ""
    iterations: int = 1000
    seed: int = 0
    lr_field: float = 1e-3
    lr_shape: float = 1e-3
    lr_lighting: float = 1e-2
    lr_decay: str = "none"      # "none" | "cosine" (decays to 0 over iterations)
    checkpoint_every: int = 500
    # camera
    azimuth_range: tuple = (0.0, 2.0 * np.pi)
    elevation_range: tuple = (-np.pi / 9.0, np.pi / 3.0)
    radius_range: tuple = (1.5, 3.0)
    focal_range: tuple = (35.0, 70.0)
    fill_range: tuple = (0.72, 0.88)
    image_width: int = 64
    image_height: int = 64
    # zoom
    region_probs: dict = field(default_factory=default_region_probs)
    # lighting
    p_rand_light: float = 0.2
    light_dc_range: tuple = (0.8, 1.5)
    light_band_range: tuple = (-0.3, 0.3)
    light_ambient_range: tuple = (0.0, 0.2)
    # pose sampler scale multiplier (1.0 = defaults; 0.0 = rest pose only)
    pose_scale: float = 1.0
    # render
    n_coarse: int = 32
    n_fine: int = 32
    rays_per_step: int = 0          # 0 = every pixel
    albedo_prob: float = 0.1        # render albedo-only this fraction of steps
    shade_with_density_normals: bool = False
    normal_weight_cutoff: float = 1e-3
    # losses
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # architecture
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self):
        if not self.prompt:
            raise ConfigError("prompt", "must be a non-empty string")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        for name in ("lr_field", "lr_shape", "lr_lighting"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be > 0")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigError("lr_decay", "must be 'none' or 'cosine'")
        for name in ("azimuth_range", "elevation_range", "radius_range",
                     "focal_range", "fill_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ConfigError(name, "must be a finite (lo, hi) pair with lo <= hi")
        if self.radius_range[0] <= 0 or self.focal_range[0] <= 0:
            raise ConfigError("radius_range", "must be positive")
        if not 0 <= self.p_rand_light <= 1:
            raise ConfigError("p_rand_light", "must lie in [0, 1]")
        if not 0 <= self.albedo_prob <= 1:
            raise ConfigError("albedo_prob", "must lie in [0, 1]")
        if set(self.region_probs) != set(REGIONS):
            raise ConfigError("region_probs", f"must cover exactly {sorted(REGIONS)}")
        total = sum(self.region_probs.values())
        if abs(total - 1.0) > 1e-6:
            raise ConfigError("region_probs", f"must sum to 1 (got {total})")
        if min(self.region_probs.values()) < 0:
            raise ConfigError("region_probs", "must be non-negative")
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ConfigError("n_coarse", "sample counts must be >= 1")
        if self.rays_per_step < 0:
            raise ConfigError("rays_per_step", "must be >= 0")
        try:
            self.loss_weights.validate()
        except ValueError as e:
            raise ConfigError("loss_weights", str(e)) from e
        return self


_SECTION_FIELDS = {
    "optimize": ["prompt", "iterations", "seed", "lr_field", "lr_shape",
                 "lr_lighting", "lr_decay", "checkpoint_every"],
    "camera": ["azimuth_range", "elevation_range", "radius_range", "focal_range",
               "fill_range", "image_width", "image_height"],
    "zoom": ["region_probs"],
    "lighting": ["p_rand_light", "light_dc_range", "light_band_range",
                 "light_ambient_range"],
    "pose": ["pose_scale"],
    "render": ["n_coarse", "n_fine", "rays_per_step", "albedo_prob",
               "shade_with_density_normals", "normal_weight_cutoff"],
}


def load_config(path) -> TrainConfig:
    with open(path, "rb") as f:
        try:
            doc = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError("<file>", f"TOML parse error: {e}") from e
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> TrainConfig:
    cfg = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    for section, keys in _SECTION_FIELDS.items():
        block = doc.get(section, {})
        if not isinstance(block, dict):
            raise ConfigError(section, "must be a table")
        for key, value in block.items():
            if key not in keys:
                raise ConfigError(f"{section}.{key}", "unknown key")
            if key.endswith("_range"):
                if not (isinstance(value, (list, tuple)) and len(value) == 2):
                    raise ConfigError(f"{section}.{key}", "must be a [lo, hi] pair")
                value = (float(value[0]), float(value[1]))
            setattr(cfg, key, value)
    if "loss_weights" in doc:
        lw = doc["loss_weights"]
        for key, value in lw.items():
            if not hasattr(cfg.loss_weights, key):
                raise ConfigError(f"loss_weights.{key}", "unknown loss term")
            setattr(cfg.loss_weights, key, float(value))
    if "arch" in doc:
        base = cfg.arch.to_dict()
        for key, value in doc["arch"].items():
            if key not in base:
                raise ConfigError(f"arch.{key}", "unknown key")
            base[key] = value
        cfg.arch = ArchConfig.from_dict(base)
    extra = set(doc) - set(_SECTION_FIELDS) - {"loss_weights", "arch"}
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown section")
    _ = known
    return cfg.validate()
