"""Scenario configuration: YAML on disk, nested dataclasses in memory.

Every key is optional; omitted keys take the defaults below.  Unknown keys
are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from vesselscreen.centerline import OptimizerConfig
from vesselscreen.control import ImpedanceParams
from vesselscreen.geometry import ImageCalibration
from vesselscreen.phantom import NoiseModel, RadiusProfile, SurfacePlane, TubePhantom


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    centerline: str = "straight"  # straight | polyline | helix
    radius_mm: float = 7.5
    depth_mm: float = 20.0
    direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    length_mm: float = 200.0
    vertices: Tuple[Tuple[float, float, float], ...] = ()
    bend_radius_mm: float = 150.0
    arc_deg: float = 60.0
    pitch_mm: float = 0.0
    radius_profile: str = "constant"  # constant | bump
    bumps: Tuple[Tuple[float, float, float], ...] = ()
    start_fraction: float = 0.3

    def __post_init__(self):
        if self.centerline not in ("straight", "polyline", "helix"):
            raise ConfigError(f"unknown centerline kind {self.centerline!r}")
        if self.radius_profile not in ("constant", "bump"):
            raise ConfigError(f"unknown radius profile {self.radius_profile!r}")
        if self.centerline == "polyline" and len(self.vertices) < 2:
            raise ConfigError("polyline centerline needs at least two vertices")
        if not 0.0 <= self.start_fraction <= 1.0:
            raise ConfigError("start_fraction must lie in [0, 1]")

    def build(self) -> TubePhantom:
        bumps = tuple(tuple(map(float, b)) for b in self.bumps) if self.radius_profile == "bump" else ()
        profile = RadiusProfile(self.radius_mm, bumps)
        surface = SurfacePlane()
        center = (0.0, 0.0, -self.depth_mm)
        if self.centerline == "straight":
            return TubePhantom.straight(center, self.direction, self.length_mm, radius_profile=profile, surface=surface)
        if self.centerline == "helix":
            return TubePhantom.helix_segment(
                center, self.bend_radius_mm, self.pitch_mm, self.arc_deg, radius_profile=profile, surface=surface
            )
        return TubePhantom(np.asarray(self.vertices, float), profile, surface)


@dataclass(frozen=True)
class NoiseSpec:
    boundary_jitter_sigma_mm: float = 0.2
    outlier_rate: float = 0.02
    dropout_rate: float = 0.1
    false_positive_rate: float = 0.05

    def build(self, seed: int) -> NoiseModel:
        return NoiseModel(
            self.boundary_jitter_sigma_mm, self.outlier_rate, self.dropout_rate, self.false_positive_rate, seed
        )


@dataclass(frozen=True)
class SegmentationSpec:
    min_area_px: float = 30.0
    boundary_samples: int = 64
    max_cloud_points: int = 64


@dataclass(frozen=True)
class MetricSpec:
    or_threshold_deg: float = 5.0
    ce_threshold_mm: float = 0.5
    ra_threshold_mm: float = 1.0
    hold_s: float = 1.0
    lost_timeout_s: float = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 6.6
    initial_offset_deg: float = 0.0
    offset_sign: Union[int, str] = "random"
    initial_lateral_offset_mm: float = 3.0
    march_velocity_mm_s: float = 10.0
    frame_rate_hz: float = 50.0
    control_rate_hz: float = 100.0
    mount_flipped: bool = False
    operator_reset: bool = False
    contact_stiffness_N_m: float = 5000.0
    buffer_capacity: int = 10
    spread_mu: float = 5.0
    min_travel_mm: float = 1.0  # centroid travel across the buffer needed before the direction is refit
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    calibration: ImageCalibration = field(default_factory=ImageCalibration)
    segmentation: SegmentationSpec = field(default_factory=SegmentationSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    impedance: ImpedanceParams = field(default_factory=ImpedanceParams)
    metrics: MetricSpec = field(default_factory=MetricSpec)

    def __post_init__(self):
        if not 0.0 <= self.initial_offset_deg <= 45.0:
            raise ConfigError("initial_offset_deg must lie in [0, 45]")
        if self.offset_sign not in (1, -1, "random"):
            raise ConfigError("offset_sign must be 1, -1 or 'random'")
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")
        ratio = self.control_rate_hz / self.frame_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("control rate must be an integer multiple of the frame rate")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        if self.min_travel_mm < 0:
            raise ConfigError("min_travel_mm must be >= 0")

    def with_(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "phantom": PhantomSpec,
    "noise": NoiseSpec,
    "segmentation": SegmentationSpec,
    "metrics": MetricSpec,
}

_CAL_KEYS = {"L_p_mm": "L_p", "D_I_mm": "D_I", "H_px": "H", "W_px": "W", "eps0_mm": "eps0"}
_OPT_KEYS = {
    "r_l_mm": "r_l",
    "r_h_mm": "r_h",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "eps_min_mm": "eps_min",
    "tick_tock_rounds": "tick_tock_rounds",
    "inner_max_iters": "inner_max_iters",
    "convergence_tol": "convergence_tol",
}
_IMP_KEYS = {
    "K_m": "K_m",
    "damping_ratio": "damping_ratio",
    "M": "M",
    "F_d": "F_d",
    "force_limit_N": "force_limit",
}


def _tuplify(x):
    if isinstance(x, (list, tuple)):
        return tuple(_tuplify(i) for i in x)
    return x


def _renamed(section: str, data: Dict[str, Any], keys: Dict[str, str]) -> Dict[str, Any]:
    unknown = set(data) - set(keys)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return {keys[k]: v for k, v in data.items()}


def _plain(cls, section: str, data: Dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


def scenario_from_dict(data: Optional[Dict[str, Any]]) -> ScenarioConfig:
    try:
        return _scenario_from_dict(dict(data or {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _scenario_from_dict(data: Dict[str, Any]) -> ScenarioConfig:
    kw: Dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _plain(cls, name, data.pop(name) or {})
    if "calibration" in data:
        kw["calibration"] = ImageCalibration(**_renamed("calibration", data.pop("calibration") or {}, _CAL_KEYS))
    if "optimizer" in data:
        kw["optimizer"] = OptimizerConfig(**_renamed("optimizer", data.pop("optimizer") or {}, _OPT_KEYS))
    if "impedance" in data:
        kw["impedance"] = ImpedanceParams(**_renamed("impedance", data.pop("impedance") or {}, _IMP_KEYS))
    top = {f.name for f in dataclasses.fields(ScenarioConfig)} - set(_SECTIONS) - {"calibration", "optimizer", "impedance"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    kw.update(data)
    return ScenarioConfig(**kw)


def _listify(x):
    if isinstance(x, np.ndarray):
        return [_listify(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_listify(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def scenario_to_dict(cfg: ScenarioConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            out[f.name] = {k: _listify(v) for k, v in dataclasses.asdict(val).items()}
        elif f.name == "calibration":
            out[f.name] = {k: getattr(val, v) for k, v in _CAL_KEYS.items()}
        elif f.name == "optimizer":
            out[f.name] = {k: getattr(val, v) for k, v in _OPT_KEYS.items()}
        elif f.name == "impedance":
            out[f.name] = {k: _listify(getattr(val, v)) for k, v in _IMP_KEYS.items()}
        else:
            out[f.name] = _listify(val)
    return out


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping")
    return scenario_from_dict(data)


def dump_scenario(cfg: ScenarioConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False))
    return path
