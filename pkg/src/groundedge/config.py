"""Run configuration: typed sections, JSON schema validation and file loading."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import jsonschema

from .physics import CfarConfig
from .simulator import (ControllerConfig, DroneParams, GroundEffectModel, MissionConfig,
                        Scene, Segment, SensorNoise)
from .spectral import SpectralConfig


class ConfigError(ValueError):
    """Configuration failed schema validation; ``errors`` lists each problem."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class FlightConfig:
    """Mission settings shared by every simulated pass.

    ``start_jitter`` spreads the start position uniformly over
    ``start_x +- start_jitter`` so the edge time varies between flights.
    """

    speed: float = 0.5
    height: float = 0.04
    duration: float = 8.0
    start_x: float = 0.0
    start_jitter: float = 0.5
    angle_deg: float = 0.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    noise: SensorNoise = field(default_factory=SensorNoise)
    ground_effect: GroundEffectModel = field(default_factory=GroundEffectModel)

    def mission(self, start_x: float | None = None, height: float | None = None,
                angle_deg: float | None = None) -> MissionConfig:
        return MissionConfig(
            speed=self.speed,
            height=self.height if height is None else height,
            duration=self.duration,
            start_x=self.start_x if start_x is None else start_x,
            angle_deg=self.angle_deg if angle_deg is None else angle_deg,
            controller=self.controller, noise=self.noise, ground_effect=self.ground_effect)


@dataclass(frozen=True)
class NNConfig:
    window: int = 100
    epochs: int = 200
    batch_size: int = 32
    lam: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    train_stride: int = 1
    infer_stride: int = 1
    log_input: bool = True


@dataclass(frozen=True)
class CompressConfig:
    sparsity: float = 0.9
    bits: int = 8
    initial_sparsity: float = 0.0
    power: float = 3.0
    finetune_epochs: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    """Spectral-correlation baseline settings (frames at the STFT hop)."""

    window_size: int = 199
    overlap: int = 198
    fs: float = 100.0
    corr_window: int = 100
    smooth_s: float = 0.5
    min_slope_frac: float = 0.5


@dataclass(frozen=True)
class EvalConfig:
    n_train: int = 200
    n_test: int = 30
    heights: tuple[float, ...] = (0.04, 0.09, 0.12)
    angles: tuple[float, ...] = (0.0, 10.0, -10.0, 20.0, -20.0)
    n_sweep: int = 10
    max_match: float = 1.0
    gate_window: float = 0.25
    gate: bool = True
    baseline: BaselineConfig = field(default_factory=BaselineConfig)


@dataclass(frozen=True)
class RunConfig:
    drone: DroneParams = field(default_factory=DroneParams)
    scene: Scene = field(default_factory=lambda: Scene((Segment(-1.0, 2.0, 0.0, 1.0),
                                                        Segment(2.0, 6.0, 0.15, 1.0))))
    flight: FlightConfig = field(default_factory=FlightConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    cfar: CfarConfig = field(default_factory=CfarConfig)
    nn: NNConfig = field(default_factory=NNConfig)
    compress: CompressConfig = field(default_factory=CompressConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return _lists(d)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        validate(data)
        return _build(cls, data)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["seed"] = seed
        return RunConfig.from_dict(d)


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _build(cls, data: dict):
    if cls is Scene:
        return Scene.from_dict(data)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _SECTION_TYPES.get((cls, f.name))
        if sub is not None:
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    (RunConfig, "drone"): DroneParams,
    (RunConfig, "scene"): Scene,
    (RunConfig, "flight"): FlightConfig,
    (RunConfig, "spectral"): SpectralConfig,
    (RunConfig, "cfar"): CfarConfig,
    (RunConfig, "nn"): NNConfig,
    (RunConfig, "compress"): CompressConfig,
    (RunConfig, "eval"): EvalConfig,
    (FlightConfig, "controller"): ControllerConfig,
    (FlightConfig, "noise"): SensorNoise,
    (FlightConfig, "ground_effect"): GroundEffectModel,
    (EvalConfig, "baseline"): BaselineConfig,
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT_POS = {"type": "integer", "minimum": 1}
_INT_NONNEG = {"type": "integer", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


def _pair(item=_NUM) -> dict:
    return {"type": "array", "items": item, "minItems": 2, "maxItems": 2}


SCHEMA = _obj({
    "seed": _INT_NONNEG,
    "drone": _obj({
        "mass": _POS, "g": _POS, "k_t": _POS, "l_r": _POS, "c_q": _POS,
        "inertia": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
        "propeller_radius": _POS, "pwm_max": _POS,
        "hover_pwm_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    }),
    "scene": _obj({"segments": {"type": "array", "minItems": 1, "items": _obj({
        "x_start": _NUM, "x_end": _NUM, "surface_height": _NONNEG, "material_gain": _NONNEG,
    }, required=("x_start", "x_end"))}}, required=("segments",)),
    "flight": _obj({
        "speed": _POS, "height": _POS, "duration": _POS, "start_x": _NUM,
        "start_jitter": _NONNEG, "angle_deg": {"type": "number", "minimum": -80, "maximum": 80},
        "controller": _obj({k: _NONNEG for k in (
            "kp_pos", "kp_vel", "kp_z", "ki_z", "kd_z", "kp_att", "kd_att", "max_tilt")}),
        "noise": _obj({"acc_std": _NONNEG, "gyro_std": _NONNEG}),
        "ground_effect": _obj({
            "kind": {"enum": ["none", "cheeseman_bennett"]},
            "jitter_ratio": _NONNEG, "lateral_ratio": _NONNEG,
            "jitter_band": _pair(_POS),
            "r_offset": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
        }),
    }),
    "spectral": _obj({
        "window_size": {"type": "integer", "minimum": 2}, "overlap": _INT_NONNEG,
        "band": _pair(_NONNEG), "fs": _POS, "normalize": {"type": "boolean"},
    }),
    "cfar": _obj({
        "p_fa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "leading_window": _INT_POS, "guard_cells": _INT_NONNEG,
    }),
    "nn": _obj({
        "window": {"type": "integer", "minimum": 10}, "epochs": _INT_NONNEG,
        "batch_size": _INT_POS, "lam": _NONNEG, "lr": _POS,
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": _INT_NONNEG, "train_stride": _INT_POS, "infer_stride": _INT_POS,
        "log_input": {"type": "boolean"},
    }),
    "compress": _obj({
        "sparsity": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "bits": {"enum": [4, 8, 16]},
        "initial_sparsity": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "power": _POS, "finetune_epochs": _INT_NONNEG,
    }),
    "eval": _obj({
        "n_train": _INT_POS, "n_test": _INT_POS,
        "heights": {"type": "array", "items": _POS},
        "angles": {"type": "array", "items": {"type": "number", "minimum": -80, "maximum": 80}},
        "n_sweep": _INT_NONNEG, "max_match": _POS, "gate_window": _POS,
        "gate": {"type": "boolean"},
        "baseline": _obj({
            "window_size": {"type": "integer", "minimum": 2}, "overlap": _INT_NONNEG,
            "fs": _POS, "corr_window": {"type": "integer", "minimum": 3},
            "smooth_s": _NONNEG, "min_slope_frac": {"type": "number", "minimum": 0, "maximum": 1},
        }),
    }),
})


def validate(data: dict) -> None:
    """Raise :class:`ConfigError` with every schema and consistency problem."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
              for e in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))]
    if not errors:
        spec = data.get("spectral", {})
        ws, ov = spec.get("window_size", 199), spec.get("overlap", 198)
        if ov >= ws:
            errors.append("spectral: overlap must be smaller than window_size")
        comp = data.get("compress", {})
        if comp.get("initial_sparsity", 0.0) > comp.get("sparsity", 0.9):
            errors.append("compress: initial_sparsity above sparsity")
    if errors:
        raise ConfigError(errors)


def default_config_dict() -> dict:
    text = resources.files("groundedge").joinpath("data/default.json").read_text("utf-8")
    return json.loads(text)


def load_config(path=None) -> RunConfig:
    """Load a JSON config; missing keys fall back to the defaults."""
    if path is None:
        return RunConfig.from_dict(default_config_dict())
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    try:
        return RunConfig.from_dict(copy.deepcopy(data))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError([str(exc)]) from None
