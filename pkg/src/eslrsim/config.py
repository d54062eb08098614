"""Run configuration: one nested schema mirroring every module's knobs.

Loaded from JSON; unknown keys are rejected at every level, every key has a
default, and the effective config is echoed into each output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ValidationError
from .physics import PhysicsConfig, default_loss_weights


@dataclass
class MeshConfig:
    density: float = 0.2  # kg/m^2
    world_edge_radius_factor: float = 1.5  # times mean garment rest edge length
    world_edge_radius: float = 0.0  # absolute override in meters; 0 = use factor


@dataclass
class GeodesicConfig:
    embed_dim: int = 8
    mds_max_iters: int = 500
    mds_tol: float = 1e-9


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    lsdmp_layers: int = 15
    smoothing_steps: int = 3
    gsa_blocks: int = 4
    standardize_embedding: bool = False


@dataclass
class SimConfig:
    placement_height: float = 0.0  # garment translation along the up axis
    body_gap: float = 0.015  # body apex sits this far below the placed cloth
    sphere_radius: float = 0.3
    sphere_lat: int = 9
    sphere_lon: int = 12
    capsule_radius: float = 0.12
    capsule_half_length: float = 0.3
    capsule_lat: int = 9
    capsule_lon: int = 12
    eval_frames: int = 30


@dataclass
class SceneSpec:
    garment: str = ""  # OBJ path
    body: str = "static_sphere"
    amplitude: float | None = None  # preset default when omitted
    frequency: float | None = None
    embedding: str | None = None  # default: sibling .geo1 of the garment


@dataclass
class TrainerConfig:
    iterations: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    scenes: list[SceneSpec] = field(default_factory=list)
    checkpoint_interval: int = 500
    warmup_steps: int = 5  # free (untrained) frames before the training step
    warmup_mode: str = "model"  # model: no-grad model steps | drift: constant velocity
    time_horizon: int = 60  # frames from which the time offset is sampled


@dataclass
class RunConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)


_WEIGHT_KEYS = frozenset(default_loss_weights())


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ValidationError(f"config section '{path}' must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValidationError(
            f"unknown config key(s) {sorted(unknown)} under '{path or 'top level'}'")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key == "scenes":
            kwargs[key] = [_build(SceneSpec, s, f"{sub}[{i}]")
                           for i, s in enumerate(value)]
        elif key == "weights":
            if not isinstance(value, dict) or set(value) - _WEIGHT_KEYS:
                raise ValidationError(
                    f"'{sub}' must map a subset of {sorted(_WEIGHT_KEYS)}")
            merged = default_loss_weights()
            merged.update({k: float(v) for k, v in value.items()})
            kwargs[key] = merged
        elif key in _SECTION_TYPES:
            kwargs[key] = _build(_SECTION_TYPES[key], value, sub)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "mesh": MeshConfig,
    "geodesic": GeodesicConfig,
    "model": ModelConfig,
    "physics": PhysicsConfig,
    "sim": SimConfig,
    "trainer": TrainerConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON config: {e}") from None
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
