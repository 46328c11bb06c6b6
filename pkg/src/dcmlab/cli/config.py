"""Run configuration: flat dotted keys in a YAML document over per-module defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..analysis import MetricWeights
from ..denoiser import DenoiserConfig
from ..diffusion import TRAJECTORY_KINDS, NoiseSchedule, TeacherConfig, TrajectoryGrid
from ..distill import DISTILL_STAGES, DistillConfig
from ..synth_data import DataConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class GridConfig:
    points: int = 50
    kappa: int = 37


@dataclass
class SamplerConfig:
    steps: int = 4
    variant: str = "seme+dete"
    count: int = 16
    seed: int = 1000


@dataclass
class AnalysisConfig:
    curve_seeds: int = 8
    curve_class: int = 0
    kappa_threshold: float = 0.05
    kappa_space: str = "x0"         # curve used by --kappa: "x0" | "state"
    fine_buckets: bool = False


@dataclass
class EvalConfig:
    seeds: int = 16
    seed_offset: int = 5000
    steps: int = 4
    reference_count: int = 256
    weight_motion: float = MetricWeights.motion
    weight_detail: float = MetricWeights.detail
    weight_coherence: float = MetricWeights.coherence

    @property
    def weights(self) -> MetricWeights:
        return MetricWeights(self.weight_motion, self.weight_detail, self.weight_coherence)


def _sections() -> dict:
    out = {
        "data": DataConfig(),
        "model": DenoiserConfig(),
        "schedule": ScheduleConfig(),
        "grid": GridConfig(),
        "teacher": TeacherConfig(),
        "sampler": SamplerConfig(),
        "analysis": AnalysisConfig(),
        "eval": EvalConfig(),
    }
    for stage in DISTILL_STAGES:
        out[f"distill.{stage}"] = DistillConfig(stage=stage)
    return out


_FIXED = {("distill.vcm", "stage"), ("distill.semantic", "stage"), ("distill.detail", "stage")}


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-5) as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(key, d, v) for d, v in zip(default, value))
    raise ConfigError(f"{key}: unsupported value type")


@dataclass
class Config:
    sections: dict = field(default_factory=_sections)

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def distill(self, stage: str) -> DistillConfig:
        return self.sections[f"distill.{stage}"]

    @classmethod
    def from_mapping(cls, mapping: dict | None) -> "Config":
        cfg = cls()
        if not mapping:
            cfg.validate()
            return cfg
        if not isinstance(mapping, dict):
            raise ConfigError("config document must be a mapping of dotted keys")
        updates: dict[str, dict] = {}
        for key, value in mapping.items():
            if not isinstance(key, str) or "." not in key:
                raise ConfigError(f"unknown config key {key!r}")
            section, _, name = key.rpartition(".")
            if section not in cfg.sections or (section, name) in _FIXED:
                raise ConfigError(f"unknown config key {key!r}")
            current = cfg.sections[section]
            fields = {f.name: f for f in dataclasses.fields(current)}
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            updates.setdefault(section, {})[name] = _coerce(key, getattr(current, name), value)
        for section, kw in updates.items():
            cfg.sections[section] = dataclasses.replace(cfg.sections[section], **kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "Config":
        if path is None:
            return cls.from_mapping(None)
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_mapping(doc)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.model.validate()
            for stage in DISTILL_STAGES:
                self.distill(stage).validate(self.model.frames)
            self.grid_obj()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d, m = self.data, self.model
        if (d.frames, d.height, d.width, d.classes) != (m.frames, m.height, m.width, m.classes):
            raise ConfigError("data and model disagree on clip shape or class count")
        if m.num_timesteps != self.schedule.steps:
            raise ConfigError("model.num_timesteps must equal schedule.steps")
        if self.sampler.steps < 2 or self.sampler.steps % 2 or self.eval.steps < 2 or self.eval.steps % 2:
            raise ConfigError("sampling step budgets must be even and >= 2")
        if not 0 < self.analysis.kappa_threshold < 1:
            raise ConfigError("analysis.kappa_threshold must lie in (0, 1)")
        if self.analysis.kappa_space not in TRAJECTORY_KINDS:
            raise ConfigError(f"analysis.kappa_space must be one of {', '.join(TRAJECTORY_KINDS)}")

    def schedule_obj(self) -> NoiseSchedule:
        s = self.schedule
        return NoiseSchedule(s.steps, s.beta_start, s.beta_end)

    def grid_obj(self) -> TrajectoryGrid:
        return TrajectoryGrid(self.schedule_obj(), self.grid.points, self.grid.kappa)

    def to_flat(self) -> dict:
        out = {}
        for section in sorted(self.sections):
            for f in dataclasses.fields(self.sections[section]):
                if (section, f.name) in _FIXED:
                    continue
                v = getattr(self.sections[section], f.name)
                out[f"{section}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.to_flat(), sort_keys=True)
